"""Second-order lifts of sampled paths.

A :class:`RoughPath` stores the base path on a coarse grid and one ``d x d``
Lévy block per consecutive interval. Arbitrary pairs are rebuilt through
Chen's relation from an eagerly built prefix cache ``A_k = XX(0, t_k)``:

    XX(s, t) = A(t) - A(s) - (X(s) - X(0)) (x) (X(t) - X(s))
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument
from .grid_paths import (EXACT_HOLDER_LIMIT, SamplePath, TimeGrid, holder_quotient,
                         pairwise_holder)

DEFAULT_ALPHA = 0.45


@dataclass(frozen=True)
class RoughPath:
    base: SamplePath
    levy: np.ndarray  # (N, d, d), block k is XX(t_k, t_{k+1})
    alpha: float = DEFAULT_ALPHA
    lift_rule: str = "ito"
    _prefix: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        levy = np.array(self.levy, dtype=float)
        N, d = self.base.grid.N, self.base.d
        if levy.shape != (N, d, d):
            raise InvalidArgument(f"levy blocks must have shape {(N, d, d)}, got {levy.shape}")
        if not 1 / 3 < self.alpha < 1 / 2:
            raise InvalidArgument("alpha must lie in (1/3, 1/2)")
        if self.lift_rule not in ("ito", "stratonovich"):
            raise InvalidArgument(f"unknown lift rule {self.lift_rule!r}")
        levy.setflags(write=False)
        object.__setattr__(self, "levy", levy)
        X = self.base.values
        dX = np.diff(X, axis=0)
        steps = levy + np.einsum("ki,kj->kij", X[:-1] - X[0], dX)
        prefix = np.zeros((N + 1, d, d))
        np.cumsum(steps, axis=0, out=prefix[1:])
        prefix.setflags(write=False)
        object.__setattr__(self, "_prefix", prefix)

    @property
    def grid(self) -> TimeGrid:
        return self.base.grid

    @property
    def d(self) -> int:
        return self.base.d

    @property
    def times(self):
        return self.base.times

    def increment(self, j, k) -> np.ndarray:
        X = self.base.values
        return X[k] - X[j]

    def area(self, j, k) -> np.ndarray:
        """``XX(t_j, t_k)`` for index scalars or arrays (``j <= k``)."""
        X = self.base.values
        A = self._prefix
        return A[k] - A[j] - np.einsum("...i,...j->...ij", X[j] - X[0], X[k] - X[j])

    def at(self, s: float, t: float) -> np.ndarray:
        j, k = self.grid.index(s), self.grid.index(t)
        if j > k:
            raise InvalidArgument("need s <= t")
        return self.area(j, k)

    def with_levy(self, levy) -> "RoughPath":
        return RoughPath(self.base, levy, self.alpha, self.lift_rule)

    def to_json(self) -> str:
        return json.dumps({
            "grid": self.times.tolist(),
            "base": self.base.values.tolist(),
            "levy": self.levy.tolist(),
            "alpha": self.alpha,
            "lift_rule": self.lift_rule,
        })

    @classmethod
    def from_json(cls, text: str) -> "RoughPath":
        obj = json.loads(text)
        try:
            grid = TimeGrid(np.array(obj["grid"], float))
            base = SamplePath(grid, np.array(obj["base"], float))
            return cls(base, np.array(obj["levy"], float), float(obj["alpha"]),
                       obj.get("lift_rule", "ito"))
        except KeyError as exc:
            raise InvalidArgument(f"missing field {exc}") from None


def ito_lift(path: SamplePath, oversample: int = 1, alpha: float = DEFAULT_ALPHA) -> RoughPath:
    """Left-point lift of ``path`` onto every ``oversample``-th grid point.

    ``path`` is the fine path; the returned rough path lives on the coarse grid
    and each Lévy block is the left-point sum over the ``oversample`` sub-steps.
    With ``oversample=1`` every block is zero.
    """
    if int(oversample) != oversample or oversample < 1:
        raise InvalidArgument("oversampling factor must be an integer >= 1")
    m = int(oversample)
    if path.grid.N % m:
        raise InvalidArgument(f"{path.grid.N} steps is not a multiple of {m}")
    X = path.values
    N, d = path.grid.N // m, path.d
    coarse = X[::m]
    fine = X.reshape(-1, d)[:-1].reshape(N, m, d)  # left points per block
    right = X[1:].reshape(N, m, d)
    dX = right - fine
    rel = fine - coarse[:-1, None, :]
    levy = np.einsum("kmi,kmj->kij", rel, dX)
    return RoughPath(SamplePath(path.grid.coarsen(m), coarse), levy, alpha, "ito")


def ito_levy_batch(paths: np.ndarray, oversample: int) -> tuple[np.ndarray, np.ndarray]:
    """Batched lift of ``(M, N*m+1, d)`` fine paths.

    Returns the coarse increments ``(M, N, d)`` and Lévy blocks ``(M, N, d, d)``.
    """
    M, n1, d = paths.shape
    m = int(oversample)
    N = (n1 - 1) // m
    if N * m != n1 - 1:
        raise InvalidArgument("fine grid does not split into whole blocks")
    left = paths[:, :-1].reshape(M, N, m, d)
    right = paths[:, 1:].reshape(M, N, m, d)
    rel = left - left[:, :, :1, :]
    levy = np.einsum("bkmi,bkmj->bkij", rel, right - left)
    dX = paths[:, m::m] - paths[:, :-1:m]
    return dX, levy


def stratonovich_correction(rp: RoughPath) -> RoughPath:
    """Brownian Stratonovich lift: add ``(t-s)/2`` times the identity to each block."""
    if rp.lift_rule != "ito":
        raise InvalidArgument("correction applies to an Itô lift")
    dt = rp.grid.steps
    levy = rp.levy + 0.5 * dt[:, None, None] * np.eye(rp.d)
    return RoughPath(rp.base, levy, rp.alpha, "stratonovich")


def chen_defect(rp: RoughPath, s: float, u: float, t: float) -> np.ndarray:
    """``XX(s,t) - XX(s,u) - XX(u,t) - (X(u)-X(s)) (x) (X(t)-X(u))``."""
    g = rp.grid
    j, l, k = g.index(s), g.index(u), g.index(t)
    if not j <= l <= k:
        raise InvalidArgument("need s <= u <= t")
    return chen_defect_idx(rp, j, l, k)


def chen_defect_idx(rp: RoughPath, j, l, k) -> np.ndarray:
    a = rp.area
    return a(j, k) - a(j, l) - a(l, k) - np.einsum(
        "...i,...j->...ij", rp.increment(j, l), rp.increment(l, k))


def levy_holder(rp: RoughPath, exponent: float | None = None,
                exact_limit: int = EXACT_HOLDER_LIMIT) -> float:
    exponent = 2 * rp.alpha if exponent is None else exponent
    return pairwise_holder(lambda j, k: np.linalg.norm(rp.area(j, k), axis=(-2, -1)),
                           rp.times, exponent, exact_limit)[0]


def rough_metric(a: RoughPath, b: RoughPath, alpha: float | None = None,
                 exact_limit: int = EXACT_HOLDER_LIMIT) -> float:
    """``|X - Y|_alpha + |XX - YY|_{2 alpha}`` over grid pairs."""
    if a.grid != b.grid or a.d != b.d:
        raise InvalidArgument("rough paths live on different grids or dimensions")
    alpha = a.alpha if alpha is None else alpha
    first = holder_quotient(a.base.values - b.base.values, a.times, alpha, exact_limit)[0]

    def inc(j, k):
        return np.linalg.norm(a.area(j, k) - b.area(j, k), axis=(-2, -1))

    second = pairwise_holder(inc, a.times, 2 * alpha, exact_limit)[0]
    return first + second


def rough_norm(rp: RoughPath, alpha: float | None = None) -> float:
    """Inhomogeneous size ``|X|_alpha + |XX|_{2 alpha}``."""
    alpha = rp.alpha if alpha is None else alpha
    return holder_quotient(rp.base.values, rp.times, alpha)[0] + levy_holder(rp, 2 * alpha)


def brownian_rough_path(grid: TimeGrid, d: int, seed: int, oversample: int = 8,
                        sample: int = 0, alpha: float = DEFAULT_ALPHA,
                        rule: str = "ito") -> RoughPath:
    """Brownian rough path on ``grid``, lifted from an ``oversample``-times finer draw."""
    from .grid_paths import sample_brownian
    frac = np.arange(oversample) / oversample
    inner = (grid.points[:-1, None] + grid.steps[:, None] * frac[None, :]).ravel()
    fine = TimeGrid(np.append(inner, grid.T))
    rp = ito_lift(sample_brownian(fine, d, seed, sample), oversample, alpha)
    rp = RoughPath(SamplePath(grid, rp.base.values), rp.levy, alpha, "ito")
    return stratonovich_correction(rp) if rule == "stratonovich" else rp
