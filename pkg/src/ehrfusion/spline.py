"""Natural cubic spline control paths over irregular lab panels.

Each panel trajectory (irregular observation times, per-channel missingness,
per-channel observation counts) is turned into a continuously evaluable path:
one natural cubic spline per observed lab channel, one per cumulative
observation-intensity channel, and an identity time channel. The path and its
analytic derivative drive the controlled differential equation solver.

Conventions:
  * times are on each patient's rescaled [0, 1] clock (oldest event -> 0);
  * a channel with fewer than two observations becomes a constant path at the
    normalized population mean (0 after standardization);
  * outside the knot range the boundary cubic segment is continued.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_banded


def fit_natural_cubic(times: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Per-interval coefficients (a, b, c, d) of the natural cubic spline.

    Segment i evaluates as a + b*dt + c*dt^2 + d*dt^3 with dt = t - times[i].
    Natural boundary: zero second derivative at both end knots. Two points
    degrade to the straight line through them.
    """
    t = np.asarray(times, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    n = t.size
    if n < 2:
        raise ValueError("need at least two knots")
    if np.any(np.diff(t) <= 0):
        raise ValueError("knot times must be strictly increasing")
    h = np.diff(t)
    if n == 2:
        b = (y[1] - y[0]) / h[0]
        return np.array([[y[0], b, 0.0, 0.0]])

    # Tridiagonal system for interior second derivatives m[1..n-2].
    rhs = (y[2:] - y[1:-1]) / h[1:] - (y[1:-1] - y[:-2]) / h[:-1]
    diag = (h[:-1] + h[1:]) / 3.0
    upper = h[1:-1] / 6.0
    band = np.zeros((3, n - 2))
    band[1] = diag
    band[0, 1:] = upper
    band[2, :-1] = upper
    m = np.zeros(n)
    m[1:-1] = solve_banded((1, 1), band, rhs)

    a = y[:-1]
    b = (y[1:] - y[:-1]) / h - h * (2.0 * m[:-1] + m[1:]) / 6.0
    c = m[:-1] / 2.0
    d = (m[1:] - m[:-1]) / (6.0 * h)
    return np.stack([a, b, c, d], axis=1)


class Cubic1D:
    """Piecewise cubic over fixed knots, with analytic derivatives."""

    __slots__ = ("knots", "coeffs")

    def __init__(self, knots: np.ndarray, coeffs: np.ndarray):
        self.knots = np.asarray(knots, dtype=np.float64)
        self.coeffs = np.asarray(coeffs, dtype=np.float64)

    @classmethod
    def fit(cls, times, values) -> "Cubic1D":
        return cls(np.asarray(times, dtype=np.float64), fit_natural_cubic(times, values))

    @classmethod
    def constant(cls, value: float, t0: float = 0.0, t1: float = 1.0) -> "Cubic1D":
        return cls(np.array([t0, t1]), np.array([[value, 0.0, 0.0, 0.0]]))

    def _segment(self, t):
        idx = np.searchsorted(self.knots, t, side="right") - 1
        return np.clip(idx, 0, len(self.coeffs) - 1)

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        i = self._segment(t)
        a, b, c, d = self.coeffs[i].T if t.ndim else self.coeffs[i]
        dt = t - self.knots[i]
        return a + dt * (b + dt * (c + dt * d))

    def derivative(self, t):
        t = np.asarray(t, dtype=np.float64)
        i = self._segment(t)
        a, b, c, d = self.coeffs[i].T if t.ndim else self.coeffs[i]
        dt = t - self.knots[i]
        return b + dt * (2.0 * c + dt * 3.0 * d)

    def second_derivative(self, t):
        t = np.asarray(t, dtype=np.float64)
        i = self._segment(t)
        a, b, c, d = self.coeffs[i].T if t.ndim else self.coeffs[i]
        dt = t - self.knots[i]
        return 2.0 * c + 6.0 * d * dt


@dataclass
class PanelTrajectory:
    """One panel's irregular multivariate observations for one patient.

    ``values[j, ch]`` is NaN where channel ``ch`` was not measured at
    ``times[j]``. ``intensity[j, ch]`` is the cumulative observation count of
    channel ``ch`` up to and including ``times[j]``, normalized by the
    patient's total observation count for the panel.
    """

    panel: str
    times: np.ndarray          # (k,) strictly increasing, rescaled clock
    values: np.ndarray         # (k, v) with NaN missingness markers
    intensity: np.ndarray      # (k, v) normalized cumulative counts

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        self.intensity = np.asarray(self.intensity, dtype=np.float64)
        if self.times.size and np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")
        if np.any(np.diff(self.intensity, axis=0) < 0):
            raise ValueError("intensity must be non-decreasing per channel")


@dataclass
class ControlPath:
    """Continuously evaluable spline path for one panel of one patient.

    channel_layout is [lab channels] + [intensity channels] + ["time"];
    intensity channels are omitted when the path was built without them.
    """

    panel: str
    channels: list            # Cubic1D per channel, time channel last
    channel_layout: list[str]
    t0: float
    t1: float
    n_labs: int = field(default=0)

    @property
    def n_channels(self) -> int:
        return len(self.channels)


def build_control_path(traj: PanelTrajectory, n_labs: int,
                       include_intensity: bool = True) -> ControlPath:
    """Fit one spline per channel of a panel trajectory.

    Lab channels are fit to their own observed (time, value) points only;
    intensity channels to cumulative counts on the panel's time grid; the
    time channel is the identity. Channels with fewer than two observed
    points become constant paths at 0 (the normalized population mean).
    """
    if traj.values.size and traj.values.shape[1] != n_labs:
        raise ValueError(f"panel '{traj.panel}' expects {n_labs} lab channels")
    k = traj.times.size
    has_grid = k >= 2
    t0 = float(traj.times[0]) if k else 0.0
    t1 = float(traj.times[-1]) if k else 1.0
    if t1 <= t0:
        t1 = t0 + 1.0

    channels: list[Cubic1D] = []
    layout: list[str] = []
    for ch in range(n_labs):
        observed = ~np.isnan(traj.values[:, ch]) if k else np.zeros(0, dtype=bool)
        if observed.sum() >= 2:
            channels.append(Cubic1D.fit(traj.times[observed], traj.values[observed, ch]))
        else:
            channels.append(Cubic1D.constant(0.0, t0, t1))
        layout.append(f"lab{ch}")
    if include_intensity:
        for ch in range(n_labs):
            if has_grid:
                channels.append(Cubic1D.fit(traj.times, traj.intensity[:, ch]))
            else:
                val = float(traj.intensity[-1, ch]) if k else 0.0
                channels.append(Cubic1D.constant(val, t0, t1))
            layout.append(f"intensity{ch}")
    # Identity time channel: value t, slope 1.
    channels.append(Cubic1D(np.array([t0, t1]), np.array([[t0, 1.0, 0.0, 0.0]])))
    layout.append("time")
    return ControlPath(traj.panel, channels, layout, t0, t1, n_labs)


def eval_path(path: ControlPath, t: float) -> np.ndarray:
    """Path value at ``t``; extrapolates with the boundary cubic."""
    return np.array([ch(t) for ch in path.channels])


def eval_derivative(path: ControlPath, t: float) -> np.ndarray:
    """Analytic path derivative at ``t``."""
    return np.array([ch.derivative(t) for ch in path.channels])


class BatchedPaths:
    """Padded-array view of many single-panel paths for vectorized solving.

    Integration runs on a common unit clock sigma in [0, 1] per batch; each
    patient's panel interval [t0, t1] is mapped affinely onto it and the
    chain-rule factor (t1 - t0) is folded into the returned derivative. CDE
    solutions are invariant under this reparameterization.
    """

    def __init__(self, paths: list[ControlPath]):
        self.n = len(paths)
        self.c = paths[0].n_channels
        if any(p.n_channels != self.c for p in paths):
            raise ValueError("paths in a batch must share the channel layout")
        rows = [ch for p in paths for ch in p.channels]
        kmax = max(ch.knots.size for ch in rows)
        r = len(rows)
        self.knots = np.full((r, kmax), np.inf)
        self.coeffs = np.zeros((r, kmax - 1, 4))
        self.last_seg = np.empty(r, dtype=np.intp)
        for i, ch in enumerate(rows):
            kk = ch.knots.size
            self.knots[i, :kk] = ch.knots
            self.coeffs[i, : kk - 1] = ch.coeffs
            self.last_seg[i] = kk - 2
        self.t0 = np.array([p.t0 for p in paths])
        self.span = np.array([p.t1 - p.t0 for p in paths])
        self._rows = np.arange(r)

    def _locate(self, sigma: float):
        t = self.t0 + sigma * self.span                      # (n,)
        tt = np.repeat(t, self.c)                            # (rows,)
        idx = (self.knots <= tt[:, None]).sum(axis=1) - 1
        np.clip(idx, 0, self.last_seg, out=idx)
        dt = tt - self.knots[self._rows, idx]
        return idx, dt

    def values_at(self, sigma: float) -> np.ndarray:
        """(n, channels) path values at unit-clock position sigma."""
        idx, dt = self._locate(sigma)
        co = self.coeffs[self._rows, idx]
        out = co[:, 0] + dt * (co[:, 1] + dt * (co[:, 2] + dt * co[:, 3]))
        return out.reshape(self.n, self.c)

    def derivative_at(self, sigma: float) -> np.ndarray:
        """(n, channels) derivative w.r.t. the unit clock (span folded in)."""
        idx, dt = self._locate(sigma)
        co = self.coeffs[self._rows, idx]
        out = co[:, 1] + dt * (2.0 * co[:, 2] + dt * 3.0 * co[:, 3])
        return out.reshape(self.n, self.c) * self.span[:, None]
