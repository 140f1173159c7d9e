"""Time changes ``tau`` and the time-changed driver ``W o tau``.

Kinds:

* ``lookahead``: ``tau(t) = (t + delta) ^ T``, kink at ``T - delta`` where the
  left derivative (1) is used;
* ``full``: ``tau = T``;
* ``identity``;
* ``affine``: ``tau(t) = t + delta (1 - t/T)``, a C^1 example with ``tau > id``
  on ``[0, T)``;
* ``table``: piecewise linear through given ``(t, tau)`` knots.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, UnsupportedConfiguration, ValidationFailure
from .grid_paths import SamplePath, TimeGrid


@dataclass(frozen=True)
class TimeChange:
    kind: str
    T: float
    delta: float = 0.0
    knots: tuple = field(default=())  # for "table": ((t0, tau0), (t1, tau1), ...)

    def __post_init__(self):
        if self.kind not in ("lookahead", "full", "identity", "affine", "table"):
            raise InvalidArgument(f"unknown time change kind {self.kind!r}")
        if not self.T > 0:
            raise InvalidArgument("horizon must be positive")
        if self.kind in ("lookahead", "affine") and not 0 <= self.delta <= self.T:
            raise InvalidArgument("lookahead window must lie in [0, T]")
        if self.kind == "table":
            k = np.asarray(self.knots, float)
            if k.ndim != 2 or k.shape[1] != 2 or k.shape[0] < 2:
                raise InvalidArgument("table time change needs (t, tau) knot pairs")
            if not np.all(np.diff(k[:, 0]) > 0):
                raise InvalidArgument("table knots must have increasing times")

    # -- evaluation -----------------------------------------------------------
    def tau(self, t):
        t = np.asarray(t, float)
        T = self.T
        if self.kind == "lookahead":
            return np.minimum(t + self.delta, T)
        if self.kind == "full":
            return np.full_like(t, T)
        if self.kind == "identity":
            return t.copy()
        if self.kind == "affine":
            return t + self.delta * (1 - t / T)
        k = np.asarray(self.knots, float)
        return np.interp(t, k[:, 0], k[:, 1])

    def dtau(self, t):
        """Derivative; left derivative at kinks."""
        t = np.asarray(t, float)
        if self.kind == "lookahead":
            return np.where(t <= self.T - self.delta, 1.0, 0.0) + 0 * t
        if self.kind == "full":
            return np.zeros_like(t)
        if self.kind == "identity":
            return np.ones_like(t)
        if self.kind == "affine":
            return np.full_like(t, 1 - self.delta / self.T)
        k = np.asarray(self.knots, float)
        slopes = np.diff(k[:, 1]) / np.diff(k[:, 0])
        idx = np.clip(np.searchsorted(k[:, 0], t, side="left") - 1, 0, slopes.size - 1)
        return slopes[idx]

    def kinks(self) -> np.ndarray:
        if self.kind == "lookahead" and 0 < self.delta < self.T:
            return np.array([self.T - self.delta])
        if self.kind == "table":
            return np.asarray(self.knots, float)[1:-1, 0]
        return np.array([])

    def inverse(self, s):
        """``min{u : tau(u) >= s}`` (``0`` when ``s <= tau(0)``)."""
        s = np.asarray(s, float)
        T = self.T
        if self.kind == "lookahead":
            return np.clip(s - self.delta, 0.0, T)
        if self.kind == "full":
            return np.zeros_like(s)
        if self.kind == "identity":
            return s.copy()
        if self.kind == "affine":
            return np.clip((s - self.delta) / (1 - self.delta / T), 0.0, T) \
                if self.delta < T else np.zeros_like(s)
        return np.vectorize(self._bisect_inverse, otypes=[float])(s)

    def _bisect_inverse(self, s: float) -> float:
        if s <= float(self.tau(0.0)):
            return 0.0
        lo, hi = 0.0, self.T
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if float(self.tau(mid)) >= s:
                hi = mid
            else:
                lo = mid
            if hi - lo <= 1e-15 * self.T:
                break
        return hi

    def dinverse(self, s):
        """Derivative of the generalised inverse, ``1/tau'(tau^{-1}(s))``."""
        s = np.asarray(s, float)
        u = self.inverse(s)
        dt = self.dtau(u)
        if np.any((dt <= 0) & (s > self.tau(0.0))):
            raise UnsupportedConfiguration("tau is not strictly increasing where its inverse is differentiated")
        with np.errstate(divide="ignore"):
            out = np.where(s > self.tau(0.0), 1.0 / np.where(dt > 0, dt, 1.0), 0.0)
        return out

    def to_spec(self) -> dict:
        spec = {"kind": self.kind}
        if self.kind in ("lookahead", "affine"):
            spec["delta"] = self.delta
        if self.kind == "table":
            spec["points"] = [list(p) for p in self.knots]
        return spec


def lookahead(delta: float, T: float = 1.0) -> TimeChange:
    return TimeChange("lookahead", T, delta)


def full_knowledge(T: float = 1.0) -> TimeChange:
    return TimeChange("full", T)


def identity(T: float = 1.0) -> TimeChange:
    return TimeChange("identity", T)


def parse_timechange(spec, T: float = 1.0) -> TimeChange:
    """From a config dict ``{kind, delta?, points?}`` or a string ``kind[:delta]``."""
    if isinstance(spec, str):
        kind, _, arg = spec.partition(":")
        spec = {"kind": kind}
        if arg:
            spec["delta"] = float(arg)
    kind = spec.get("kind")
    if kind in ("lookahead", "affine"):
        if "delta" not in spec:
            raise InvalidArgument(f"{kind} time change needs a delta")
        return TimeChange(kind, T, float(spec["delta"]))
    if kind == "table":
        return TimeChange("table", T, knots=tuple(tuple(map(float, p)) for p in spec["points"]))
    return TimeChange(kind, T)


# -------------------------------------------------------------------- checks

def validate_timechange(tc: TimeChange, grid: TimeGrid, fd_step: float = 1e-6,
                        rtol: float = 1e-4) -> dict:
    """Monotonicity, ``tau >= id``, ``tau(T) = T`` and ``tau'`` against finite differences."""
    t = grid.points
    tau = tc.tau(t)
    eps = 1e-12 * max(1.0, tc.T)
    problems = []
    bad = np.where(np.diff(tau) < -eps)[0]
    if bad.size:
        problems.append(("not nondecreasing", t[bad + 1].tolist()))
    bad = np.where(tau < t - eps)[0]
    if bad.size:
        problems.append(("tau below the identity", t[bad].tolist()))
    if abs(tau[-1] - tc.T) > eps or abs(grid.T - tc.T) > eps:
        problems.append(("tau(T) != T", [float(grid.T)]))
    bad = np.where((tau < -eps) | (tau > tc.T + eps))[0]
    if bad.size:
        problems.append(("tau leaves [0, T]", t[bad].tolist()))
    kinks = tc.kinks()
    interior = t[(t > fd_step) & (t < tc.T - fd_step)]
    if kinks.size:
        interior = interior[np.min(np.abs(interior[:, None] - kinks[None, :]), axis=1) > 2 * fd_step]
    fd = (tc.tau(interior + fd_step) - tc.tau(interior - fd_step)) / (2 * fd_step)
    gap = np.abs(tc.dtau(interior) - fd)
    bad = np.where(gap > rtol * np.maximum(1.0, np.abs(fd)))[0]
    if bad.size:
        problems.append(("tau' disagrees with finite differences", interior[bad].tolist()))
    if problems:
        msg = "; ".join(p[0] for p in problems)
        raise ValidationFailure(f"invalid time change: {msg}", offending=problems)
    return {"ok": True, "points": int(t.size), "derivative_checked": int(interior.size)}


# ------------------------------------------------------------- path operations

@dataclass(frozen=True)
class TauIndex:
    """Where ``tau(t_k)`` sits on the grid: ``lo``, ``hi`` and interpolation weight."""

    lo: np.ndarray
    hi: np.ndarray
    weight: np.ndarray
    exact: bool

    def evaluate(self, values: np.ndarray) -> np.ndarray:
        """``values`` has the grid on axis ``-2`` (``(..., N+1, d)``)."""
        lo = values[..., self.lo, :]
        if self.exact:
            return lo
        hi = values[..., self.hi, :]
        w = self.weight[:, None]
        return (1 - w) * lo + w * hi


def tau_index(tc: TimeChange, grid: TimeGrid, tol: float = 1e-9) -> TauIndex:
    pts = grid.points
    target = np.clip(tc.tau(pts), 0.0, grid.T)
    pos = np.clip(np.searchsorted(pts, target, side="left"), 0, grid.N)
    scale = tol * max(1.0, grid.T)
    on_pos = np.abs(pts[pos] - target) <= scale
    lo = np.where(on_pos, pos, np.maximum(pos - 1, 0))
    on_lo = np.abs(pts[lo] - target) <= scale
    hi = np.where(on_pos | on_lo, lo, pos)
    span = pts[hi] - pts[lo]
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(span > 0, (target - pts[lo]) / np.where(span > 0, span, 1.0), 0.0)
    exact = bool(np.all(hi == lo))
    return TauIndex(lo, hi, w, exact)


def time_changed_values(values: np.ndarray, tc: TimeChange, grid: TimeGrid) -> np.ndarray:
    """``W(tau(t_k)) - W(tau(0))`` for values shaped ``(..., N+1, d)``."""
    ti = tau_index(tc, grid)
    if not ti.exact:
        warnings.warn("tau maps grid points off the grid; using linear interpolation", stacklevel=2)
    Wt = ti.evaluate(values)
    return Wt - Wt[..., :1, :]


def time_changed_path(W: SamplePath, tc: TimeChange) -> SamplePath:
    return SamplePath(W.grid, time_changed_values(W.values, tc, W.grid))


def split_initial_segment(W: SamplePath, tc: TimeChange) -> tuple[SamplePath, SamplePath]:
    """``(W on [0, tau(0)], W o tau)``.

    When ``tau(0)`` is not a grid point the segment ends with an interpolated point.
    """
    t0 = float(tc.tau(0.0))
    pts = W.times
    k = int(np.searchsorted(pts, t0 + 1e-12 * max(1.0, W.grid.T), side="right"))
    seg_t = pts[:k]
    seg_v = W.values[:k]
    if abs(seg_t[-1] - t0) > 1e-12 * max(1.0, W.grid.T):
        seg_t = np.append(seg_t, t0)
        seg_v = np.vstack([seg_v, W.at(t0)])
    if seg_t.size == 1:
        first = _single_point(seg_v[0])
    else:
        first = SamplePath(TimeGrid(seg_t), seg_v)
    return first, time_changed_path(W, tc)


@dataclass(frozen=True)
class PointSegment:
    """Degenerate initial segment ``[0, 0]``."""

    value: np.ndarray

    @property
    def values(self):
        return self.value[None, :]

    @property
    def times(self):
        return np.zeros(1)


def _single_point(v):
    return PointSegment(np.asarray(v, float))


def concatenate_at(w: SamplePath, z: SamplePath, t: float, tc: TimeChange) -> SamplePath:
    """``s -> (w o tau)(s ^ t) + z(s v t)`` on the common grid.

    ``w`` supplies the driver (only its values on ``[0, tau(t)]`` are read), ``z``
    the continuation on ``[t, T]``.
    """
    if w.grid != z.grid:
        raise InvalidArgument("paths live on different grids")
    grid = w.grid
    k = grid.index(t)
    wt = time_changed_values(w.values, tc, grid)
    out = np.empty_like(wt)
    out[:k + 1] = wt[:k + 1] + z.values[k]
    out[k + 1:] = wt[k] + z.values[k + 1:]
    return SamplePath(grid, out)


def continuation(W: SamplePath, tc: TimeChange, t: float) -> SamplePath:
    """``W o tau - W(tau(t))`` on ``[t, T]``, frozen at 0 before ``t``."""
    grid = W.grid
    k = grid.index(t)
    wt = time_changed_values(W.values, tc, grid)
    z = wt - wt[k]
    z[:k] = 0.0
    return SamplePath(grid, z)


def grid_for_lookahead(T: float, delta: float, target_steps: int) -> TimeGrid:
    """Uniform grid near ``target_steps`` on which ``delta`` is a whole number of steps."""
    from .grid_paths import make_uniform_grid
    if delta <= 0:
        return make_uniform_grid(T, target_steps)
    ratio = T / delta
    if abs(ratio - round(ratio)) > 1e-9:
        raise InvalidArgument("T/delta must be an integer for an aligned uniform grid")
    per = max(1, int(round(target_steps / round(ratio))))
    return make_uniform_grid(T, per * int(round(ratio)))
