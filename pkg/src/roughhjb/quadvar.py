"""Pathwise quadratic variation along partition sequences.

The level-``n`` measure puts mass ``(x(u) - x(s))^{(x)2}`` at the left point of
every partition interval ``[s, u]``. Cumulative functions are evaluated as
``mu_n([0, t))`` so that ``[x](0) = 0`` at every level.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidArgument
from .grid_paths import (PartitionSequence, SamplePath, TimeGrid, brownian_batch,
                         dyadic_partitions, make_uniform_grid)
from .timechange import TimeChange, time_changed_values

CHECKPOINTS = 33


def checkpoints(T: float, count: int = CHECKPOINTS) -> np.ndarray:
    return np.linspace(0.0, T, count)


@dataclass
class QVResult:
    level: int
    atoms_t: np.ndarray  # (K,)
    atoms: np.ndarray  # (K, d, d)

    def cumulative(self, t) -> np.ndarray:
        """``mu_n([0, t))`` for scalar or array ``t`` -> ``(..., d, d)``."""
        t = np.asarray(t, float)
        cum = np.concatenate([np.zeros((1,) + self.atoms.shape[1:]), np.cumsum(self.atoms, axis=0)])
        k = np.searchsorted(self.atoms_t, t, side="left")
        return cum[k]

    @property
    def total(self) -> np.ndarray:
        return self.atoms.sum(axis=0)

    @property
    def total_variation(self) -> np.ndarray:
        """Entrywise total variation of each signed coordinate measure."""
        return np.abs(self.atoms).sum(axis=0)


def _partition_indices(grid: TimeGrid, points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    idx = np.clip(np.searchsorted(grid.points, points - tol * max(1.0, grid.T)), 0, grid.N)
    if np.any(np.abs(grid.points[idx] - points) > tol * max(1.0, grid.T)):
        raise InvalidArgument("partition exceeds the grid resolution (points off the grid)")
    return idx


def qv_along_partitions(x: SamplePath, ps: PartitionSequence) -> list[QVResult]:
    out = []
    for label, part in zip(ps.labels, ps.levels):
        idx = _partition_indices(x.grid, part.points)
        inc = np.diff(x.values[idx], axis=0)
        out.append(QVResult(label, part.points[:-1].copy(), np.einsum("ki,kj->kij", inc, inc)))
    return out


def cumulative_batch(values: np.ndarray, grid: TimeGrid, partition_points: np.ndarray,
                     at: np.ndarray) -> np.ndarray:
    """Batched ``mu_n([0, t))`` for values ``(M, N+1, d)`` -> ``(M, len(at), d, d)``."""
    idx = _partition_indices(grid, partition_points)
    inc = np.diff(values[:, idx], axis=1)
    atoms = np.einsum("mki,mkj->mkij", inc, inc)
    cum = np.concatenate([np.zeros_like(atoms[:, :1]), np.cumsum(atoms, axis=1)], axis=1)
    k = np.searchsorted(partition_points[:-1], at, side="left")
    return cum[:, k]


def fine_grid_for(T: float, levels: int, tc: TimeChange | None = None, max_factor: int = 64) -> TimeGrid:
    """Smallest uniform grid holding the level-``levels`` dyadic points and mapped
    onto itself by a lookahead time change."""
    base = 2 ** levels
    if tc is None or tc.kind != "lookahead" or tc.delta in (0.0, T):
        return make_uniform_grid(T, base)
    frac = Fraction(tc.delta / T).limit_denominator(10 ** 6)
    for q in range(1, max_factor + 1):
        if (frac * base * q).denominator == 1:
            return make_uniform_grid(T, base * q)
    raise InvalidArgument("no aligned grid found for this lookahead")


def cross_qv_stats(seeds: Sequence[int], tc: TimeChange, ps: PartitionSequence | None = None,
                   T: float = 1.0, levels: int | None = None, d: int = 1,
                   grid: TimeGrid | None = None, chunk: int = 50) -> dict:
    """Per-level statistics of the QV blocks of ``(W, W o tau)`` over seeds.

    Targets: cross block -> 0, ``[W] -> id``, ``[W o tau] -> tau - tau(0)``.
    """
    if ps is None:
        ps = dyadic_partitions(T, levels or 10)
    top = max(ps.labels)
    grid = grid or fine_grid_for(T, top, tc)
    at = checkpoints(T)
    seeds = list(seeds)
    M = len(seeds)
    L = len(ps)
    cross = np.empty((L, M, at.size))
    diagW = np.empty((L, M, at.size))
    diagZ = np.empty((L, M, at.size))
    tv_ok = np.ones(L, bool)
    for c0 in range(0, M, chunk):
        ids = seeds[c0:c0 + chunk]
        W = np.stack([brownian_batch(grid, d, s, [0])[0] for s in ids])
        Z = time_changed_values(W, tc, grid)
        joint = np.concatenate([W, Z], axis=2)
        for li, part in enumerate(ps.levels):
            cum = cumulative_batch(joint, grid, part.points, at)
            cross[li, c0:c0 + len(ids)] = cum[:, :, 0, d]
            diagW[li, c0:c0 + len(ids)] = cum[:, :, 0, 0]
            diagZ[li, c0:c0 + len(ids)] = cum[:, :, d, d]
            idx = _partition_indices(grid, part.points)
            iw = np.diff(W[:, idx, 0], axis=1)
            iz = np.diff(Z[:, idx, 0], axis=1)
            tv = np.abs(iw * iz).sum(axis=1)
            cs = np.sqrt((iw ** 2).sum(axis=1) * (iz ** 2).sum(axis=1))
            tv_ok[li] &= bool(np.all(tv <= cs * (1 + 1e-12) + 1e-300))
    target_Z = tc.tau(at) - tc.tau(0.0)
    levels_out = []
    for li, label in enumerate(ps.labels):
        c, w, z = cross[li], diagW[li], diagZ[li]
        levels_out.append({
            "level": int(label),
            "t": at.tolist(),
            "cross_mean": c.mean(0).tolist(),
            "cross_stderr": (c.std(0, ddof=1) / np.sqrt(M)).tolist() if M > 1 else [0.0] * at.size,
            "cross_rms": np.sqrt((c ** 2).mean(0)).tolist(),
            "W_mean": w.mean(0).tolist(),
            "W_abs_err_q95_T": float(np.quantile(np.abs(w[:, -1] - at[-1]), 0.95)),
            "Wtau_mean": z.mean(0).tolist(),
            "Wtau_target": target_Z.tolist(),
            "cauchy_schwarz_ok": bool(tv_ok[li]),
            "cross_equals_diag": bool(np.array_equal(c, w)),
        })
    return {"samples": M, "grid_steps": grid.N, "levels": levels_out}


def solution_qv_batch(Y: np.ndarray, fY: np.ndarray, Wtau: np.ndarray, grid: TimeGrid,
                      ps: PartitionSequence, tc: TimeChange, at: np.ndarray | None = None) -> list[dict]:
    """QV of ``(Y, W o tau)`` against ``diag(int f f^T dt, (tau - tau(0)) I)``.

    ``Y`` is ``(M, N+1, n)``, ``fY`` is ``(M, N+1, n, d)``, ``Wtau`` is ``(M, N+1, d)``.
    Returns per level the sup-norm deviation per sample at the checkpoints, along
    with the Y-block values and quadrature targets.
    """
    at = checkpoints(grid.T) if at is None else at
    n = Y.shape[2]
    d = Wtau.shape[2]
    ffT = np.einsum("mkid,mkjd->mkij", fY, fY)
    dt = np.diff(grid.points)
    trap = 0.5 * (ffT[:, 1:] + ffT[:, :-1]) * dt[None, :, None, None]
    integral = np.concatenate([np.zeros_like(trap[:, :1]), np.cumsum(trap, axis=1)], axis=1)
    kk = np.clip(np.searchsorted(grid.points, at - 1e-12), 0, grid.N)
    target = np.zeros((Y.shape[0], at.size, n + d, n + d))
    target[:, :, :n, :n] = integral[:, kk]
    target[:, :, n:, n:] = (tc.tau(at) - tc.tau(0.0))[None, :, None, None] * np.eye(d)
    joint = np.concatenate([Y, Wtau], axis=2)
    out = []
    for label, part in zip(ps.labels, ps.levels):
        cum = cumulative_batch(joint, grid, part.points, at)
        dev = np.abs(cum - target).max(axis=(1, 2, 3))
        out.append({"level": int(label), "sup_deviation": dev, "qv": cum, "target": target})
    return out


def solution_qv_check(sol, f: Callable, tc: TimeChange, ps: PartitionSequence) -> list[dict]:
    """Single-solution wrapper of :func:`solution_qv_batch`."""
    grid = sol.cp.grid
    W = sol.cp.reference.base.values
    Y = sol.Y[None]
    fY = np.asarray(f(sol.Y))[None]
    Wtau = time_changed_values(W, tc, grid)[None]
    res = solution_qv_batch(Y, fY, Wtau, grid, ps, tc)
    return [{"level": r["level"], "sup_deviation": float(r["sup_deviation"][0])} for r in res]


def weak_convergence_probe(F_n: Sequence[Callable], F: Callable, dense_grid: np.ndarray) -> dict:
    """Max pointwise gap ``|F_n - F|`` on ``dense_grid`` and total-variation proxies."""
    ref = np.asarray(F(dense_grid), float)
    gaps, tvs = [], []
    for Fk in F_n:
        vals = np.asarray(Fk(dense_grid), float)
        gaps.append(float(np.max(np.abs(vals - ref))))
        tvs.append(float(np.sum(np.abs(np.diff(vals, axis=0)))))
    return {"max_gap": gaps, "total_variation": tvs}
