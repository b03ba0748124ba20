"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records every primitive applied to tracked tensors in creation
order (which is topological by construction). ``backward`` replays the tape
in reverse, accumulating vector-Jacobian products. All primitives the model
architecture needs live here: dense linear algebra, pointwise activations,
softmax, concatenation/slicing, reductions, embedding row gather, a stable
binary cross-entropy, and one fused convenience primitive for the CDE
vector-field application (see ``field_contract``).

Everything is float64. Any primitive producing a non-finite value raises
``NonFiniteError`` immediately rather than letting NaN/Inf propagate.
"""

from __future__ import annotations

import numpy as np


class NonFiniteError(FloatingPointError):
    """A forward primitive produced NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested primitive."""


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by '{op}'")


class Tape:
    """Ordered record of primitives with parent handles and VJP closures.

    ``parents[i]`` holds the node ids feeding node ``i`` and ``vjps[i]`` maps
    the output gradient to per-parent gradient contributions. Leaves have an
    empty parent tuple and no VJP. Node ids are assigned in creation order,
    so every node's parents precede it.
    """

    def __init__(self, check_finite: bool = True):
        self.parents: list[tuple[int, ...]] = []
        self.vjps: list = []
        self.leaf_ids: list[int] = []
        self.check_finite = check_finite

    def __len__(self) -> int:
        return len(self.parents)

    def record(self, parents: tuple[int, ...], vjp) -> int:
        self.parents.append(parents)
        self.vjps.append(vjp)
        return len(self.parents) - 1

    def leaf(self, data) -> "Tensor":
        """Register ``data`` as a tracked leaf (trainable or input array)."""
        arr = np.asarray(data, dtype=np.float64)
        if self.check_finite:
            _check_finite(arr, "leaf")
        nid = self.record((), None)
        self.leaf_ids.append(nid)
        return Tensor(arr, self, nid)


class Tensor:
    """Dense float64 array, optionally tracked on a tape.

    ``node_id`` is the handle into the active tape, or None for constants.
    """

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: Tape | None = None, node_id: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tracked = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.data.shape}{tracked})"

    # Operator sugar; the module-level functions are the primitives.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def constant(data) -> Tensor:
    """An untracked tensor; gradients never flow into it."""
    return Tensor(np.asarray(data, dtype=np.float64))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _tape_of(*ts: Tensor) -> Tape | None:
    tape = None
    for t in ts:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise ValueError("operands live on different tapes")
            tape = t.tape
    return tape


def _emit(tape: Tape | None, out: np.ndarray, op: str, parents, vjp) -> Tensor:
    """Record the op if any input is tracked; always check finiteness."""
    if tape is None:
        _check_finite(out, op)
        return Tensor(out)
    if tape.check_finite:
        _check_finite(out, op)
    tracked = [(i, t.node_id) for i, t in enumerate(parents) if t.node_id is not None]
    if not tracked:
        return Tensor(out)
    slots = tuple(i for i, _ in tracked)
    ids = tuple(nid for _, nid in tracked)

    def vjp_tracked(g, _vjp=vjp, _slots=slots):
        full = _vjp(g)
        return tuple(full[i] for i in _slots)

    nid = tape.record(ids, vjp_tracked)
    return Tensor(out, tape, nid)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return _emit(_tape_of(a, b), out, "add", (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def vjp(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))

    return _emit(_tape_of(a, b), out, "sub", (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))

    return _emit(_tape_of(a, b), out, "mul", (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c

    def vjp(g):
        return (g * c,)

    return _emit(a.tape, out, "scale", (a,), vjp)


def lincomb(coeffs, tensors) -> Tensor:
    """sum_i coeffs[i] * tensors[i], as a single tape node.

    The ODE solver builds every Runge-Kutta stage with this; one node per
    stage keeps the tape small.
    """
    coeffs = [float(c) for c in coeffs]
    if len(coeffs) != len(tensors):
        raise ShapeError("lincomb: one coefficient per tensor required")
    out = coeffs[0] * tensors[0].data
    for c, t in zip(coeffs[1:], tensors[1:]):
        if c != 0.0:
            out += c * t.data

    def vjp(g):
        return tuple(g * c for c in coeffs)

    return _emit(_tape_of(*tensors), out, "lincomb", tuple(tensors), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports stacked (leading-batch) operands."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul expects >=2-d operands")
    out = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return (_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape))

    return _emit(_tape_of(a, b), out, "matmul", (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    out = np.swapaxes(a.data, -1, -2).copy()

    def vjp(g):
        return (np.swapaxes(g, -1, -2),)

    return _emit(a.tape, out, "transpose", (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(old),)

    return _emit(a.tape, out, "reshape", (a,), vjp)


def bias_add(a: Tensor, b: Tensor) -> Tensor:
    """a + b with b broadcast over the leading axes (bias vector)."""
    if a.data.shape[-1] != b.data.shape[-1] or b.data.ndim != 1:
        raise ShapeError("bias_add expects a 1-d bias matching the last axis")
    out = a.data + b.data
    bshape = b.data.shape

    def vjp(g):
        return (g, g.reshape(-1, bshape[0]).sum(axis=0))

    return _emit(_tape_of(a, b), out, "bias_add", (a, b), vjp)


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _emit(a.tape, out, "tanh", (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _emit(a.tape, out, "sigmoid", (a,), vjp)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Stable in both tails.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0  # subgradient at 0 is 0

    def vjp(g):
        return (g * mask,)

    return _emit(a.tape, out, "relu", (a,), vjp)


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)
    ad = a.data

    def vjp(g):
        return (g * _sigmoid(ad),)

    return _emit(a.tape, out, "softplus", (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax with max-subtraction along ``axis``."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _emit(a.tape, out, "softmax", (a,), vjp)


# ---------------------------------------------------------------------------
# shape manipulation


def concat(tensors, axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.array_split(g, splits, axis=axis))

    return _emit(_tape_of(*tensors), out, "concat", tuple(tensors), vjp)


def stack(tensors, axis: int = 0) -> Tensor:
    out = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        parts = np.moveaxis(g, axis, 0)
        return tuple(parts[i] for i in range(len(tensors)))

    return _emit(_tape_of(*tensors), out, "stack", tuple(tensors), vjp)


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start:stop) along ``axis``."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = a.data[idx].copy()
    shape = a.data.shape

    def vjp(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _emit(a.tape, out, "narrow", (a,), vjp)


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather rows of a 2-d tensor (embedding lookup). Backward scatter-adds."""
    idx = np.asarray(indices)
    out = a.data[idx]
    shape = a.data.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _emit(a.tape, out, "take_rows", (a,), vjp)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    out = a.data.mean(axis=axis)
    shape = a.data.shape
    n = a.data.size if axis is None else shape[axis]

    def vjp(g):
        if axis is None:
            return (np.full(shape, g / n),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return _emit(a.tape, out, "mean", (a,), vjp)


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    out = a.data.sum(axis=axis)
    shape = a.data.shape

    def vjp(g):
        if axis is None:
            return (np.full(shape, g),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit(a.tape, out, "sum", (a,), vjp)


def mul_const(a: Tensor, arr: np.ndarray) -> Tensor:
    """Elementwise product with an untracked array (dropout masks etc.)."""
    out = a.data * arr

    def vjp(g):
        return (g * arr,)

    return _emit(a.tape, out, "mul_const", (a,), vjp)


# ---------------------------------------------------------------------------
# losses


def bce_with_logits(logits: Tensor, targets: np.ndarray, pos_weight: float = 1.0) -> Tensor:
    """Mean binary cross-entropy on raw logits, stable in both tails.

    loss_i = pos_weight * y_i * softplus(-x_i) + (1 - y_i) * softplus(x_i)
    """
    x = logits.data.reshape(-1)
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ShapeError("bce_with_logits: logits/targets length mismatch")
    n = x.size
    losses = pos_weight * y * np.logaddexp(0.0, -x) + (1.0 - y) * np.logaddexp(0.0, x)
    out = np.asarray(losses.mean())
    sig = _sigmoid(x)
    shape = logits.data.shape

    def vjp(g):
        dx = ((1.0 - y) * sig - pos_weight * y * (1.0 - sig)) / n
        return ((g * dx).reshape(shape),)

    return _emit(logits.tape, out, "bce_with_logits", (logits,), vjp)


# ---------------------------------------------------------------------------
# fused CDE vector-field application


def field_contract(
    z: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    dxdt: np.ndarray,
    drop_mask: np.ndarray | None = None,
) -> Tensor:
    """phi(z) @ dX/dt for a batch, as one primitive.

    phi(z) = tanh(W2 . dropout(relu(W1 . z + b1)) + b2) reshaped to
    (batch, d, channels), contracted with the control derivative
    dxdt (batch, channels). Intermediates of shape (batch, d*channels) are
    recomputed in the backward pass instead of being saved; saving them for
    every Runge-Kutta stage would dominate memory.
    """
    B, d = z.data.shape
    c = dxdt.shape[1]
    if w2.data.shape[1] != d * c:
        raise ShapeError("field_contract: W2 columns must equal d * channels")
    a1 = z.data @ w1.data + b1.data
    h = np.maximum(a1, 0.0)
    if drop_mask is not None:
        h = h * drop_mask
    y = np.tanh(h @ w2.data + b2.data)
    out = np.einsum("bdc,bc->bd", y.reshape(B, d, c), dxdt)
    zd, w1d, b1d, w2d, b2d = z.data, w1.data, b1.data, w2.data, b2.data

    def vjp(g):
        a1_ = zd @ w1d + b1d
        h_ = np.maximum(a1_, 0.0)
        if drop_mask is not None:
            h_ = h_ * drop_mask
        y_ = np.tanh(h_ @ w2d + b2d)
        dy = np.einsum("bd,bc->bdc", g, dxdt).reshape(B, d * c)
        du = dy * (1.0 - y_ * y_)
        dw2 = h_.T @ du
        db2 = du.sum(axis=0)
        dh = du @ w2d.T
        if drop_mask is not None:
            dh = dh * drop_mask
        da1 = dh * (a1_ > 0)
        dw1 = zd.T @ da1
        db1 = da1.sum(axis=0)
        dz = da1 @ w1d.T
        return (dz, dw1, db1, dw2, db2)

    return _emit(_tape_of(z, w1, b1, w2, b2), out, "field_contract", (z, w1, b1, w2, b2), vjp)


# ---------------------------------------------------------------------------
# backward pass


def backward(tape: Tape, output: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``output`` w.r.t. every leaf on the tape.

    Reverse topological sweep; each node is visited exactly once, gradients
    accumulate additively across fan-out, and intermediate gradients are
    freed as soon as their node is processed. Leaves with no path to the
    output get zeros.
    """
    if output.tape is not tape or output.node_id is None:
        raise ValueError("output is not a tracked tensor on this tape")
    if output.data.size != 1:
        raise ValueError("backward requires a scalar output")

    parents = tape.parents
    out_id = output.node_id

    # Mark nodes reachable from the output.
    reachable = np.zeros(out_id + 1, dtype=bool)
    stack = [out_id]
    reachable[out_id] = True
    while stack:
        nid = stack.pop()
        for pid in parents[nid]:
            if not reachable[pid]:
                reachable[pid] = True
                stack.append(pid)

    grads: dict[int, np.ndarray] = {out_id: np.ones(output.data.shape)}
    for nid in range(out_id, -1, -1):
        if not reachable[nid]:
            continue
        g = grads.get(nid)
        if g is None:
            continue
        vjp = tape.vjps[nid]
        if vjp is None:
            continue  # leaf; keep its gradient
        for pid, pg in zip(parents[nid], vjp(g)):
            acc = grads.get(pid)
            if acc is None:
                grads[pid] = pg.copy() if pg.base is not None else pg
            else:
                acc += pg
        del grads[nid]

    result = {}
    for lid in tape.leaf_ids:
        if lid in grads:
            result[lid] = grads[lid]
        else:
            result[lid] = None  # filled by caller-known shapes if needed
    return result


def grad(tape: Tape, output: Tensor, leaves: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Named-leaf convenience wrapper around ``backward``."""
    raw = backward(tape, output)
    out = {}
    for name, t in leaves.items():
        g = raw.get(t.node_id)
        out[name] = np.zeros(t.data.shape) if g is None else g
    return out


def grad_check(fn, points, h: float = 1e-5, rng: np.random.Generator | None = None,
               max_entries: int = 200) -> float:
    """Max relative error between analytic gradients and central differences.

    ``fn`` maps a dict of named Tensors to a scalar Tensor. For arrays bigger
    than ``max_entries`` a seeded random coordinate subset is checked.
    Relative error is |analytic - fd| / max(1, |analytic|).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    tape = Tape()
    leaves = {name: tape.leaf(arr) for name, arr in points.items()}
    out = fn(leaves)
    analytic = grad(tape, out, leaves)

    def eval_at(arrs) -> float:
        consts = {name: constant(a) for name, a in arrs.items()}
        return fn(consts).item()

    worst = 0.0
    for name, arr in points.items():
        arr = np.asarray(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_entries else rng.choice(n, size=max_entries, replace=False)
        ga = analytic[name].reshape(-1)
        for i in coords:
            bumped = {k: np.array(v, dtype=np.float64) for k, v in points.items()}
            bumped[name].reshape(-1)[i] = flat[i] + h
            fp = eval_at(bumped)
            bumped[name].reshape(-1)[i] = flat[i] - h
            fm = eval_at(bumped)
            fd = (fp - fm) / (2.0 * h)
            err = abs(ga[i] - fd) / max(1.0, abs(ga[i]))
            if err > worst:
                worst = err
    return worst
