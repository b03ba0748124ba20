"""Adaptive Dormand-Prince 5(4) integration of controlled dynamics.

The panel hidden state evolves as dz = phi(z) dX along the spline control
path X. Reducing the CDE to an ODE via dz/ds = phi(z) * (dX/ds)(s), the
classic 7-stage dopri5 embedded pair integrates it with FSAL, componentwise
error control, and step-size adaptation. Every accepted stage is recorded on
the autodiff tape, so backward differentiates the solver steps actually
taken (discretize-then-optimize); step-size control itself runs on detached
values and contributes no gradient.

For gradient checks the accepted step sequence of a reference run can be
replayed verbatim (``fixed_steps``), which removes step-acceptance
discontinuities from finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .spline import BatchedPaths, ControlPath

# Dormand-Prince 5(4) Butcher tableau.
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# 5th-order minus embedded 4th-order weights: local error estimate.
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])


class SolverError(RuntimeError):
    """Integration failed (step budget exhausted or unusable interval)."""


@dataclass
class SolverConfig:
    rtol: float = 1e-2
    atol: float = 1e-4
    max_steps: int = 10_000
    safety: float = 0.9
    min_factor: float = 0.2
    max_factor: float = 10.0

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class SolveInfo:
    steps: list = field(default_factory=list)  # accepted (t, h) pairs
    n_accepted: int = 0
    n_rejected: int = 0
    n_evals: int = 0


def _error_norm(err: np.ndarray, z0: np.ndarray, z1: np.ndarray, cfg: SolverConfig) -> float:
    scale = cfg.atol + cfg.rtol * np.maximum(np.abs(z0), np.abs(z1))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def _initial_step(f0: np.ndarray, z0: np.ndarray, span: float, cfg: SolverConfig) -> float:
    # Cheap variant of Hairer's starting-step heuristic; one field eval only.
    scale = cfg.atol + cfg.rtol * np.abs(z0)
    d0 = np.sqrt(np.mean((z0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h = 0.01 * d0 / d1 if d0 > 1e-5 and d1 > 1e-5 else 1e-3 * span
    return float(min(h, 0.3 * span))


def dopri5_integrate(field, z0: ad.Tensor, t0: float, t1: float, cfg: SolverConfig,
                     fixed_steps: list | None = None) -> tuple[ad.Tensor, SolveInfo]:
    """Integrate dz/dt = field(t, z) from t0 to t1; endpoint only.

    ``field`` maps (float t, Tensor z) -> Tensor dz/dt. Step accepted when
    the RMS of err / (atol + rtol * max(|z|, |z_new|)) is <= 1, step size
    scaled by safety * norm**(-1/5) clamped to [min_factor, max_factor].
    With ``fixed_steps`` the given (t, h) sequence is replayed with no error
    control (for finite-difference gradient checks).
    """
    if t1 <= t0:
        raise SolverError("t1 must exceed t0")
    info = SolveInfo()
    z = z0

    if fixed_steps is not None:
        k1 = field(t0, z)
        info.n_evals += 1
        for t, h in fixed_steps:
            z, k1, _ = _step(field, t, h, z, k1, info)
            info.steps.append((t, h))
            info.n_accepted += 1
        return z, info

    t = t0
    k1 = field(t, z)
    info.n_evals += 1
    h = _initial_step(k1.data, z.data, t1 - t0, cfg)
    while t < t1:
        if info.n_accepted + info.n_rejected >= cfg.max_steps:
            raise SolverError(f"max_steps={cfg.max_steps} exceeded at t={t:.6g}")
        h = min(h, t1 - t)
        z_new, k7, err = _step(field, t, h, z, k1, info)
        norm = _error_norm(err, z.data, z_new.data, cfg)
        if norm <= 1.0:
            info.steps.append((t, h))
            info.n_accepted += 1
            t += h
            z, k1 = z_new, k7
            factor = cfg.max_factor if norm == 0.0 else min(
                cfg.max_factor, max(cfg.min_factor, cfg.safety * norm ** -0.2))
        else:
            info.n_rejected += 1
            factor = max(cfg.min_factor, cfg.safety * norm ** -0.2)
        h *= factor
        if t + h == t:
            raise SolverError(f"step size underflow at t={t:.6g}")
    return z, info


def _step(field, t: float, h: float, z: ad.Tensor, k1: ad.Tensor, info: SolveInfo):
    """One dopri5 step from (t, z); returns (z_new, k7, error estimate)."""
    ks = [k1]
    for i in range(1, 7):
        coeffs = [1.0] + list(h * _A[i])
        zi = ad.lincomb(coeffs, [z] + ks)
        ks.append(field(t + _C[i] * h, zi))
        info.n_evals += 1
    # b7 = 0 and a_7j = b_j, so stage 7's input IS the 5th-order solution.
    z_new = ad.lincomb([1.0] + list(h * _B[:6]), [z] + ks[:6])
    err = h * sum(e * k.data for e, k in zip(_E, ks) if e != 0.0)
    return z_new, ks[6], err


# ---------------------------------------------------------------------------
# NCDE encoding of panel control paths


def make_cde_field(batch: BatchedPaths, params: dict[str, ad.Tensor],
                   drop_mask: np.ndarray | None = None):
    """Vector field ds -> phi(z) * dX/ds for a batch of spline paths.

    params: zeta_w, zeta_b (initial-condition net) and w1, b1, w2, b2
    (the two-layer field net, tanh on the final layer). The control
    derivative at each stage time is a constant w.r.t. the parameters.
    """

    def fieldfn(sigma: float, z: ad.Tensor) -> ad.Tensor:
        dxdt = batch.derivative_at(sigma)
        return ad.field_contract(z, params["w1"], params["b1"],
                                 params["w2"], params["b2"], dxdt, drop_mask)

    return fieldfn


def ncde_encode_batch(batch: BatchedPaths, params: dict[str, ad.Tensor], cfg: SolverConfig,
                      drop_mask: np.ndarray | None = None,
                      fixed_steps: list | None = None,
                      fieldfn=None) -> tuple[ad.Tensor, SolveInfo]:
    """Encode a batch of panel paths to hidden states (n, d).

    z0 = tanh(path(t0) @ zeta_w + zeta_b); the CDE runs on the shared unit
    clock (the span factor lives in ``BatchedPaths.derivative_at``), ending
    at each panel's last observation. ``fieldfn`` overrides the standard
    two-layer field (testing hook).
    """
    x0 = ad.constant(batch.values_at(0.0))
    z0 = ad.tanh(ad.bias_add(ad.matmul(x0, params["zeta_w"]), params["zeta_b"]))
    if fieldfn is None:
        fieldfn = make_cde_field(batch, params, drop_mask)
    return dopri5_integrate(fieldfn, z0, 0.0, 1.0, cfg, fixed_steps=fixed_steps)


def ncde_encode(path: ControlPath, params: dict[str, ad.Tensor], cfg: SolverConfig,
                drop_mask: np.ndarray | None = None,
                fixed_steps: list | None = None) -> ad.Tensor:
    """Single-path convenience wrapper; returns the (d,) panel embedding."""
    z, _ = ncde_encode_batch(BatchedPaths([path]), params, cfg,
                             drop_mask=drop_mask, fixed_steps=fixed_steps)
    return ad.reshape(z, (z.data.shape[1],))


def init_ncde_params(rng: np.random.Generator, n_channels: int, hidden: int,
                     hidden_hidden: int) -> dict[str, np.ndarray]:
    """Kaiming-style fan-in uniform init for the panel encoder."""

    def uniform(fan_in, shape):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return {
        "zeta_w": uniform(n_channels, (n_channels, hidden)),
        "zeta_b": np.zeros(hidden),
        "w1": uniform(hidden, (hidden, hidden_hidden)),
        "b1": np.zeros(hidden_hidden),
        "w2": uniform(hidden_hidden, (hidden_hidden, hidden * n_channels)),
        "b2": np.zeros(hidden * n_channels),
    }
