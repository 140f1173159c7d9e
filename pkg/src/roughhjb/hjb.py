"""Causal HJB residuals, Hamiltonian maximisation and Monte Carlo verification.

Candidates and feedback rules work on batches of Brownian paths sampled on one
grid: a probe is a grid index ``k``, a state ``y`` and a path ``W``. Conditioning
on the information up to ``tau(t)`` is simulated by freezing ``W`` on
``[0, tau(t)]`` and drawing fresh increments afterwards.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize

from .errors import (DivergenceError, InvalidArgument, UnboundedHamiltonian,
                     UnsupportedConfiguration, UnsupportedFunctional)
from .grid_paths import TimeGrid, keyed_normals
from .rde import Coefficients, solve_batch
from .timechange import TimeChange, tau_index

# ------------------------------------------------------------------ problem data


@dataclass(frozen=True)
class ControlSet:
    """``kind`` is ``"all"`` (R^m), ``"box"`` (``lo <= phi <= hi``) or ``"finite"``."""

    kind: str = "all"
    lo: tuple | None = None
    hi: tuple | None = None
    values: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("all", "box", "finite"):
            raise InvalidArgument(f"unknown control set {self.kind!r}")
        if self.kind == "box" and (self.lo is None or self.hi is None
                                   or np.any(np.asarray(self.lo) > np.asarray(self.hi))):
            raise InvalidArgument("box needs lo <= hi")
        if self.kind == "finite" and not self.values:
            raise InvalidArgument("finite control set is empty")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "lo": self.lo, "hi": self.hi, "values": self.values}


def box(lo, hi) -> ControlSet:
    return ControlSet("box", tuple(np.atleast_1d(lo).astype(float)), tuple(np.atleast_1d(hi).astype(float)))


def finite(values) -> ControlSet:
    vals = np.asarray(values, float)
    if vals.ndim == 1:
        vals = vals[:, None]
    return ControlSet("finite", values=tuple(map(tuple, vals)))


@dataclass
class ControlProblem:
    """``g`` maps ``(M, n)`` terminal states to ``(M,)`` rewards (or costs)."""

    coeffs: Coefficients
    g: Callable
    tc: TimeChange
    control_set: ControlSet = field(default_factory=ControlSet)
    sense: str = "maximize"
    convention: str = "ito"
    name: str = ""

    def __post_init__(self):
        if self.sense not in ("maximize", "minimize"):
            raise InvalidArgument("sense must be maximize or minimize")
        if self.convention not in ("ito", "stratonovich"):
            raise InvalidArgument("convention must be ito or stratonovich")


# -------------------------------------------------------------------- Hamiltonian

def _objective(grad_y, b, t, y, m):
    def q(phi):
        return np.einsum("pi,pi->p", grad_y, b(t[:, None], y, phi))
    return q


def hamiltonian_batch(grad_y: np.ndarray, b: Callable, t, y: np.ndarray, m: int,
                      control_set: ControlSet = ControlSet(), sense: str = "maximize",
                      rtol: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
    """``sup_phi <grad_y, b(t, y, phi)>`` (``inf`` for ``sense="minimize"``) per probe.

    ``grad_y`` and ``y`` are ``(P, n)``. Returns values ``(P,)`` and optimisers ``(P, m)``.
    On R^m the objective is probed at ``0, +-e_i, e_i + e_j`` and must be quadratic.
    """
    grad_y = np.asarray(grad_y, float)
    y = np.asarray(y, float)
    P = y.shape[0]
    t = np.broadcast_to(np.asarray(t, float), (P,))
    sign = 1.0 if sense == "maximize" else -1.0
    raw = _objective(grad_y, b, t, y, m)

    def q(phi):
        return sign * raw(phi)

    if control_set.kind == "all":
        val, phi = _quadratic_sup(q, P, m, rtol)
    elif control_set.kind == "finite":
        cands = np.asarray(control_set.values, float)
        scores = np.stack([q(np.broadcast_to(c, (P, m))) for c in cands], axis=1)
        best = np.argmax(scores, axis=1)
        val = scores[np.arange(P), best]
        phi = cands[best]
    else:
        val, phi = _box_sup(q, P, m, np.asarray(control_set.lo, float), np.asarray(control_set.hi, float))
    return sign * val, phi


def _quadratic_sup(q, P, m, rtol):
    zero = np.zeros((P, m))
    c = q(zero)
    eye = np.eye(m)
    plus = np.stack([q(np.broadcast_to(eye[i], (P, m))) for i in range(m)], axis=1)
    minus = np.stack([q(np.broadcast_to(-eye[i], (P, m))) for i in range(m)], axis=1)
    g = 0.5 * (plus - minus)
    A = np.zeros((P, m, m))
    A[:, np.arange(m), np.arange(m)] = plus + minus - 2 * c[:, None]
    for i in range(m):
        for j in range(i + 1, m):
            v = q(np.broadcast_to(eye[i] + eye[j], (P, m))) - plus[:, i] - plus[:, j] + c
            A[:, i, j] = A[:, j, i] = v
    scale = 1.0 + np.abs(c) + np.abs(plus).max(axis=1) + np.abs(minus).max(axis=1)
    # Model check away from the probing stencil.
    test = np.linspace(0.7, -1.3, m)[None, :].repeat(P, axis=0)
    model = c + np.einsum("pi,pi->p", g, test) + 0.5 * np.einsum("pi,pij,pj->p", test, A, test)
    if np.any(np.abs(q(test) - model) > 1e3 * rtol * scale):
        raise UnsupportedConfiguration("objective is not quadratic in the control; use a box or finite set")
    eig, vec = np.linalg.eigh(A)
    tol = rtol * scale
    if np.any(eig > tol[:, None]):
        raise UnboundedHamiltonian("Hamiltonian is convex in the control: supremum is +inf")
    flat = np.abs(eig) <= tol[:, None]
    lin = np.abs(np.einsum("pij,pi->pj", vec, g))
    if np.any(flat & (lin > tol[:, None])):
        raise UnboundedHamiltonian("Hamiltonian is linear in some control direction")
    inv = np.where(flat, 0.0, 1.0 / np.where(flat, 1.0, eig))
    phi = -np.einsum("pij,pj,pkj,pk->pi", vec, inv, vec, g)
    val = c + 0.5 * np.einsum("pi,pi->p", g, phi)
    return val, phi


def _box_sup(q, P, m, lo, hi):
    val = np.empty(P)
    phi = np.empty((P, m))

    def single(p):
        return lambda x: float(q_one(p, x))

    def q_one(p, x):
        full = np.zeros((P, m))
        full[p] = x
        return q(full)[p]

    for p in range(P):
        f = single(p)
        if m == 1:
            res = optimize.minimize_scalar(lambda x: -f(np.array([x])), bounds=(lo[0], hi[0]),
                                           method="bounded", options={"xatol": 1e-10})
            cands = [np.array([res.x]), lo.copy(), hi.copy()]
        else:
            res = optimize.minimize(lambda x: -f(x), 0.5 * (lo + hi), method="L-BFGS-B",
                                    bounds=list(zip(lo, hi)))
            corners = [np.where(np.array(bits), hi, lo) for bits in np.ndindex(*(2,) * m)]
            cands = [res.x] + corners
        scores = [f(c) for c in cands]
        i = int(np.argmax(scores))
        val[p], phi[p] = scores[i], cands[i]
    return val, phi


def hamiltonian_sup(grad_y, b: Callable, t: float, y, m: int = 1,
                    control_set: ControlSet = ControlSet(), sense: str = "maximize") -> tuple[float, np.ndarray]:
    """Single-probe form of :func:`hamiltonian_batch`; ``b(t, y[1, n], phi[1, m])``."""
    val, phi = hamiltonian_batch(np.atleast_2d(grad_y), b, np.array([t]), np.atleast_2d(y), m,
                                 control_set, sense)
    return float(val[0]), phi[0]


# --------------------------------------------------------------------- candidates

@dataclass
class CandidateBundle:
    """Derivatives at a batch of probes; ``None`` means identically zero."""

    value: np.ndarray
    D: np.ndarray
    grad_y: np.ndarray
    hess_y: np.ndarray
    grad_w: np.ndarray | None = None
    hess_w: np.ndarray | None = None
    hess_z: np.ndarray | None = None


@dataclass
class HJBCandidate:
    """Candidate value functional ``u(t, y, w(t), w^{tau(0)}, z)``.

    ``value(k, grid, Y, W)`` evaluates at grid indices ``k`` (``(P,)``), states
    ``Y`` (``(P, n)``) and driver paths ``W`` (``(P, N+1, d)``); entry ``p`` may
    read ``W[p, :j+1]`` only with ``t_j = tau(t_k)``. ``bundle`` has the same
    signature and returns a :class:`CandidateBundle`.
    """

    value: Callable
    bundle: Callable | None = None
    name: str = ""

    def shifted(self, c: float) -> "HJBCandidate":
        return HJBCandidate(lambda k, g, Y, W: self.value(k, g, Y, W) + c, self.bundle, f"{self.name}+{c:g}")


@dataclass
class ProbeSet:
    grid: TimeGrid
    W: np.ndarray  # (P, N+1, d)
    k: np.ndarray  # (P,)
    y: np.ndarray  # (P, n)
    y_terminal: np.ndarray | None = None  # states used for the terminal check
    seed: int | None = None

    @property
    def t(self) -> np.ndarray:
        return self.grid.points[self.k]


@dataclass
class ResidualReport:
    t: np.ndarray
    parabolic: np.ndarray
    transport: np.ndarray  # (P, d)
    terminal: np.ndarray
    phi_star: np.ndarray
    seed: int | None = None
    mode: str = "extended"
    dropped: tuple = ()

    def summary(self) -> dict:
        def stats(a):
            a = np.abs(np.asarray(a, float))
            return {"max": float(a.max(initial=0.0)), "median": float(np.median(a)) if a.size else 0.0}
        return {"probes": int(self.t.size), "seed": self.seed, "mode": self.mode,
                "dropped": list(self.dropped), "parabolic": stats(self.parabolic),
                "transport": stats(self.transport), "terminal": stats(self.terminal)}

    def passed(self, tol: float) -> bool:
        s = self.summary()
        return all(s[k]["max"] < tol for k in ("parabolic", "transport", "terminal"))


def hjb_residuals(candidate: HJBCandidate, problem: ControlProblem, probes: ProbeSet,
                  mode: str = "extended", drop: Sequence[str] = ()) -> ResidualReport:
    """Parabolic, transport and terminal residuals of the causal HJB system.

    ``drop`` removes terms by name (``"z-trace"``, ``"second-order"``) for
    ablation runs. Under the Stratonovich convention the second-order state and
    current-noise traces are absent.
    """
    if mode not in ("extended", "state"):
        raise InvalidArgument("mode must be extended or state")
    if candidate.bundle is None:
        raise UnsupportedFunctional(f"{candidate.name or 'candidate'} has no derivative bundle")
    grid, k, y, W = probes.grid, np.asarray(probes.k), np.asarray(probes.y, float), probes.W
    B = candidate.bundle(k, grid, y, W)
    if B.D is None or B.grad_y is None or B.hess_y is None:
        raise UnsupportedFunctional("candidate lacks D, grad_y or hess_y")
    t = grid.points[k]
    co = problem.coeffs
    H, phi = hamiltonian_batch(B.grad_y, co.b, t, y, co.m, problem.control_set, problem.sense)
    fv = co.f(y)
    par = B.D + H
    if problem.convention == "ito" and "second-order" not in drop:
        par = par + 0.5 * np.einsum("pad,pab,pbd->p", fv, B.hess_y, fv)
        if mode == "extended" and B.hess_w is not None:
            par = par + 0.5 * np.trace(B.hess_w, axis1=1, axis2=2)
    if B.hess_z is not None and "z-trace" not in drop:
        par = par + 0.5 * np.trace(B.hess_z, axis1=1, axis2=2) * problem.tc.dtau(t)
    transport = np.einsum("pad,pa->pd", fv, B.grad_y)
    if mode == "extended" and B.grad_w is not None:
        transport = transport + B.grad_w
    yT = y if probes.y_terminal is None else np.asarray(probes.y_terminal, float)
    kT = np.full(k.shape, grid.N)
    terminal = candidate.value(kT, grid, yT, W) - problem.g(yT)
    return ResidualReport(t, par, transport, terminal, phi, probes.seed, mode, tuple(drop))


# ---------------------------------------------------------------- feedback rules

@dataclass
class FeedbackControl:
    """``rule(k, t_k, Y_k, ctx) -> (M, m)`` with ``ctx = prepare(W, grid, tc)``.

    The rule may read ``W[:, :j+1]`` with ``t_j = tau(t_k)`` only.
    """

    rule: Callable
    prepare: Callable | None = None
    name: str = ""

    def bind(self, W: np.ndarray, grid: TimeGrid, tc: TimeChange) -> Callable:
        ctx = self.prepare(W, grid, tc) if self.prepare is not None else W
        return lambda k, t, y: self.rule(k, t, y, ctx)

    def audit(self, W: np.ndarray, grid: TimeGrid, tc: TimeChange, y: np.ndarray,
              ks: Sequence[int] | None = None, trials: int = 3, seed: int = 0) -> bool:
        """Perturb ``W`` strictly after ``tau(t_k)`` and require the same ``phi(t_k)``."""
        idx = tau_index(tc, grid)
        rng = np.random.default_rng(seed)
        ks = range(0, grid.N, max(1, grid.N // 16)) if ks is None else ks
        base = self.bind(W, grid, tc)
        for k in ks:
            ref = np.asarray(base(k, grid.points[k], y))
            j = int(idx.hi[k])
            for _ in range(trials):
                Wp = W.copy()
                Wp[:, j + 1:] += rng.standard_normal(Wp[:, j + 1:].shape)
                got = np.asarray(self.bind(Wp, grid, tc)(k, grid.points[k], y))
                if not np.array_equal(got, ref):
                    return False
        return True


def constant_control(value, m: int = 1, name: str | None = None) -> FeedbackControl:
    v = np.broadcast_to(np.asarray(value, float), (m,))
    return FeedbackControl(lambda k, t, y, ctx: np.broadcast_to(v, (y.shape[0], m)),
                           name=name or f"const({', '.join(f'{x:g}' for x in v)})")


# ------------------------------------------------------------------ Monte Carlo

@dataclass
class MCResult:
    mean: float
    stderr: float
    samples: int
    diverged: int
    values: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "samples": self.samples,
                "diverged": self.diverged}


def _second_level(dW: np.ndarray, dt: np.ndarray, convention: str) -> np.ndarray:
    # Symmetric part of the lift on each step; the antisymmetric area is dropped.
    lev = 0.5 * np.einsum("mki,mkj->mkij", dW, dW)
    if convention == "ito":
        d = dW.shape[2]
        lev = lev - 0.5 * dt[None, :, None, None] * np.eye(d)
    return lev


def _tau_point(tc: TimeChange, grid: TimeGrid, k: int) -> int:
    idx = tau_index(tc, grid)
    if idx.hi[k] != idx.lo[k]:
        raise InvalidArgument("tau(t) is not a grid point; refine the grid")
    return int(idx.lo[k])


def extend_paths(info: np.ndarray, grid: TimeGrid, key: Sequence[int], samples: Sequence[int]) -> np.ndarray:
    """Paths equal to ``info`` on its indices, continued with fresh increments keyed by ``key + (m,)``."""
    info = np.asarray(info, float)
    if info.ndim == 1:
        info = info[:, None]
    j, d = info.shape[0] - 1, info.shape[1]
    out = np.empty((len(samples), grid.N + 1, d))
    out[:, :j + 1] = info
    sq = np.sqrt(grid.steps[j:])[:, None]
    for r, m in enumerate(samples):
        inc = keyed_normals(tuple(key) + (int(m),), (grid.N - j, d)) * sq
        out[r, j + 1:] = info[-1] + np.cumsum(inc, axis=0)
    return out


def simulate(problem: ControlProblem, control: FeedbackControl | None, W: np.ndarray, grid: TimeGrid,
             k0: int, y0, k_end: int | None = None):
    """Solve the controlled equation on the batch ``W`` from grid index ``k0``."""
    k_end = grid.N if k_end is None else k_end
    sub = grid.points[:k_end + 1]
    dW = np.diff(W[:, :k_end + 1], axis=1)
    lev = _second_level(dW, np.diff(sub), problem.convention)
    fn = None if control is None else control.bind(W, grid, problem.tc)
    return solve_batch(problem.coeffs, fn, sub, dW, lev, k0, y0)


def _run_chunks(jobs: list[Callable], threads: int) -> list:
    if threads <= 1 or len(jobs) <= 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(lambda job: job(), jobs))


def _mean_stderr(vals: np.ndarray) -> tuple[float, float]:
    n = vals.size
    mean = math.fsum(vals) / n
    if n < 2:
        return mean, 0.0
    var = math.fsum((vals - mean) ** 2) / (n - 1)
    return mean, math.sqrt(var / n)


def mc_value(problem: ControlProblem, control: FeedbackControl | None, t: float, y, info: np.ndarray,
             M: int, grid: TimeGrid, base_seed: int, chunk: int = 2000, threads: int = 1,
             max_divergent: float = 0.01) -> MCResult:
    """Conditional Monte Carlo estimate of ``E[g(Y(T)) | W on [0, tau(t)]]``.

    ``info`` holds ``W`` at the grid points of ``[0, tau(t)]``. Sample ``m``
    continues it with increments keyed by ``(base_seed, m)``. Sums are exactly
    rounded, so the result does not depend on the sample order or thread count.
    """
    k0 = grid.index(t)
    j = _tau_point(problem.tc, grid, k0)
    info = np.asarray(info, float)
    if info.ndim == 1:
        info = info[:, None]
    if info.shape[0] != j + 1:
        raise InvalidArgument(f"info must cover grid indices 0..{j}")

    def job(lo):
        ids = range(lo, min(M, lo + chunk))
        W = extend_paths(info, grid, (base_seed,), ids)
        sol = simulate(problem, control, W, grid, k0, y)
        return np.asarray(problem.g(sol.Y[:, -1]), float), sol.diverged

    parts = _run_chunks([lambda lo=lo: job(lo) for lo in range(0, M, chunk)], threads)
    vals = np.concatenate([p[0] for p in parts])
    bad = np.concatenate([p[1] for p in parts]) | ~np.isfinite(vals)
    nbad = int(bad.sum())
    if nbad > max_divergent * M:
        raise DivergenceError(f"{nbad} of {M} samples diverged", None)
    good = vals[~bad]
    mean, se = _mean_stderr(good)
    return MCResult(mean, se, int(good.size), nbad, good)


@dataclass
class DriftReport:
    intervals: list
    drift: np.ndarray
    stderr: np.ndarray
    outer: int
    inner: int

    def within(self, z: float = 3.0) -> bool:
        return bool(np.all(np.abs(self.drift) <= z * self.stderr))

    def supermartingale(self, z: float = 3.0) -> bool:
        return bool(np.all(self.drift <= z * self.stderr))

    def strictly_negative(self, z: float = 3.0) -> bool:
        return bool(np.any(self.drift < -z * self.stderr))

    def to_dict(self) -> dict:
        return {"intervals": [list(map(float, iv)) for iv in self.intervals],
                "drift": self.drift.tolist(), "stderr": self.stderr.tolist(),
                "outer": self.outer, "inner": self.inner}


def martingale_drift_test(candidate: HJBCandidate, problem: ControlProblem, control: FeedbackControl | None,
                          t: float, y, info: np.ndarray, checkpoints: Sequence[float], grid: TimeGrid,
                          seed: int, outer: int = 64, inner: int = 64, threads: int = 1,
                          outer_chunk: int = 16) -> DriftReport:
    """Nested estimate of ``E[u(s2) - u(s1) | info up to tau(s1)]`` per checkpoint pair.

    For every pair, ``outer`` paths are drawn up to ``tau(s1)`` and each is
    continued ``inner`` times; the drift is the mean of the outer conditional
    means and its standard error their spread over ``sqrt(outer)``.
    """
    k0 = grid.index(t)
    j0 = _tau_point(problem.tc, grid, k0)
    info = np.asarray(info, float)
    if info.ndim == 1:
        info = info[:, None]
    if info.shape[0] != j0 + 1:
        raise InvalidArgument(f"info must cover grid indices 0..{j0}")
    ks = [grid.index(s) for s in checkpoints]
    if ks[0] < k0 or any(b <= a for a, b in zip(ks, ks[1:])):
        raise InvalidArgument("checkpoints must increase and start at or after t")
    pairs = list(zip(ks[:-1], ks[1:]))
    drift = np.empty(len(pairs))
    err = np.empty(len(pairs))
    for i, (k1, k2) in enumerate(pairs):
        j1 = _tau_point(problem.tc, grid, k1)

        def job(group, i=i, k1=k1, k2=k2, j1=j1):
            heads = [extend_paths(info, grid, (seed, i, 0), [o])[0, :j1 + 1] for o in group]
            W = np.concatenate([extend_paths(h, grid, (seed, i, o + 1), range(inner))
                                for h, o in zip(heads, group)])
            sol = simulate(problem, control, W, grid, k0, y, k_end=k2)
            if sol.diverged.any():
                raise DivergenceError("solver diverged inside the drift test", None)
            rows = W.shape[0]
            u1 = candidate.value(np.full(rows, k1), grid, sol.Y[:, k1], W)
            u2 = candidate.value(np.full(rows, k2), grid, sol.Y[:, k2], W)
            diff = (u2 - u1).reshape(len(group), inner)
            return [math.fsum(r) / inner for r in diff]

        groups = [list(range(o, min(outer, o + outer_chunk))) for o in range(0, outer, outer_chunk)]
        means = np.array([v for part in _run_chunks([lambda g=g: job(g) for g in groups], threads)
                          for v in part])
        drift[i], err[i] = _mean_stderr(means)
    times = grid.points
    return DriftReport([(times[a], times[b]) for a, b in pairs], drift, err, outer, inner)


@dataclass
class DominanceReport:
    candidate_value: float
    sense: str
    entries: dict

    @property
    def all_dominated(self) -> bool:
        return all(e["dominated"] for e in self.entries.values())

    def to_dict(self) -> dict:
        return {"candidate_value": self.candidate_value, "sense": self.sense,
                "all_dominated": self.all_dominated, "controls": self.entries}


def dominance_check(candidate_value: float, estimates: dict, sense: str = "maximize",
                    z: float = 3.0) -> DominanceReport:
    """Flag controls whose estimated reward beats the candidate by more than ``z`` stderr.

    ``estimates`` maps a control name to ``(mean, stderr)`` or an :class:`MCResult`.
    For ``sense="minimize"`` the comparison is mirrored.
    """
    out = {}
    for name, est in estimates.items():
        mean, se = (est.mean, est.stderr) if isinstance(est, MCResult) else map(float, est)
        slack = candidate_value - mean if sense == "maximize" else mean - candidate_value
        out[name] = {"mean": mean, "stderr": se, "slack": slack, "dominated": bool(slack >= -z * se)}
    return DominanceReport(float(candidate_value), sense, out)


def dominance_mc(candidate_value: float, problem: ControlProblem, controls: Sequence[FeedbackControl],
                 t: float, y, info, M: int, grid: TimeGrid, seed: int, threads: int = 1) -> DominanceReport:
    est = {c.name: mc_value(problem, c, t, y, info, M, grid, seed, threads=threads) for c in controls}
    return dominance_check(candidate_value, est, problem.sense)
