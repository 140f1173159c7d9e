"""Pathwise control with full anticipation: ``dX = phi dt + X o dW``, ``phi in [0, 1]``.

The whole driver is known from the start (``tau = T``) and the cost is
``|X(T) - 1|``. With ``A = x exp(W(T) - W(t))`` and
``I = int_t^T exp(W(T) - W(r)) dr`` the target is reachable iff ``A + I > 1``,
in which case the constant control ``(1 - A) / I`` hits it; otherwise full
speed is optimal and the cost is ``1 - A - I``. Dynamics are Stratonovich.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import integrate

from ..grid_paths import TimeGrid, brownian_batch, make_uniform_grid
from ..hjb import (CandidateBundle, ControlProblem, HJBCandidate, ProbeSet, box, constant_control, FeedbackControl,
                   dominance_check, hjb_residuals, simulate)
from ..rde import Coefficients
from ..timechange import full_knowledge


def coefficients() -> Coefficients:
    def b(t, y, phi):
        return np.stack([phi[:, 0], np.zeros(y.shape[0])], axis=1)

    def f(y):
        out = np.zeros(y.shape[:-1] + (2, 1))
        out[..., 0, 0] = y[..., 0]
        out[..., 1, 0] = 1.0
        return out

    def gradf(y):
        out = np.zeros(y.shape[:-1] + (2, 1, 2))
        out[..., 0, 0, 0] = 1.0
        return out

    return Coefficients(b=b, f=f, gradf=gradf, n=2, d=1, m=1, name="pathwise")


def cost(Y: np.ndarray) -> np.ndarray:
    return np.abs(np.asarray(Y, float)[..., 0] - 1.0)


def problem(T: float = 1.0) -> ControlProblem:
    return ControlProblem(coefficients(), cost, full_knowledge(T), box(0.0, 1.0), sense="minimize",
                          convention="stratonovich", name="pathwise")


def solution_formula(t: float, x: float, phi, W: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """``X(s) = x e^{W(s)-W(t)} + int_t^s e^{W(s)-W(r)} phi(r) dr`` on the grid (constant before ``t``)."""
    W = np.asarray(W, float).ravel()
    k = grid.index(t)
    phi = np.broadcast_to(np.asarray(phi, float).ravel(), W.shape) if np.ndim(phi) else np.full(W.shape, float(phi))
    e = np.exp(-(W[k:] - W[k]))
    inner = np.concatenate([[0.0], integrate.cumulative_trapezoid(e * phi[k:], grid.points[k:])])
    X = np.empty_like(W)
    X[:k] = x
    X[k:] = (x + inner) / e
    return X


def _reach(t, x, W, grid):
    W = np.asarray(W, float).ravel()
    k = grid.index(t)
    A = x * math.exp(W[-1] - W[k])
    I = float(integrate.trapezoid(np.exp(W[-1] - W[k:]), grid.points[k:])) if k < grid.N else 0.0
    return A, I


def value_and_control(t: float, x: float, W: np.ndarray, grid: TimeGrid) -> dict:
    """Value and optimal constant control at ``(t, x)`` given the full path ``W``."""
    A, I = _reach(t, x, W, grid)
    if A + I > 1.0:
        phi = (1.0 - A) / I if I > 0 else 0.0
        clipped = not (0.0 <= phi <= 1.0)
        phi_c = min(max(phi, 0.0), 1.0)
        value = 0.0 if not clipped else abs(A + phi_c * I - 1.0)
        return {"value": value, "phi": phi_c, "branch": "reachable", "clipped": clipped, "A": A, "I": I}
    return {"value": 1.0 - A - I, "phi": 1.0, "branch": "short", "clipped": False, "A": A, "I": I}


# ------------------------------------------------------------- HJB candidates

def candidate() -> HJBCandidate:
    """``u = 1 - x e^{W(T) - w} - int_t^T e^{W(T) - W(r)} dr`` (the ``X(T) < 1`` branch); ``y = (x, w)``."""

    def tail(k, grid, W):
        W = W[..., 0]
        e = np.exp(W[:, -1:] - W)
        cum = np.concatenate([np.zeros((W.shape[0], 1)),
                              integrate.cumulative_trapezoid(e, grid.points, axis=1)], axis=1)
        rows = np.arange(W.shape[0])
        return cum[:, -1] - cum[rows, k], e[rows, k]

    def value(k, grid, Y, W):
        I, _ = tail(np.asarray(k), grid, W)
        return 1.0 - Y[:, 0] * np.exp(W[:, -1, 0] - Y[:, 1]) - I

    def bundle(k, grid, Y, W):
        k = np.asarray(k)
        I, e_t = tail(k, grid, W)
        x, w = Y[:, 0], Y[:, 1]
        e = np.exp(W[:, -1, 0] - w)
        grad = np.stack([-e, x * e], axis=1)
        hess = np.zeros((x.size, 2, 2))
        hess[:, 0, 1] = hess[:, 1, 0] = e
        hess[:, 1, 1] = -x * e
        return CandidateBundle(value=1.0 - x * e - I, D=e_t, grad_y=grad, hess_y=hess)

    return HJBCandidate(value, bundle, name="pathwise")


def defective_candidate(T: float) -> HJBCandidate:
    """``u = 1 - x - (T - t)``: solves the parabolic equation but not the transport one."""

    def value(k, grid, Y, W):
        return 1.0 - Y[:, 0] - (T - grid.points[np.asarray(k)])

    def bundle(k, grid, Y, W):
        P = Y.shape[0]
        grad = np.tile([-1.0, 0.0], (P, 1))
        return CandidateBundle(value=value(k, grid, Y, W), D=np.ones(P), grad_y=grad,
                               hess_y=np.zeros((P, 2, 2)))

    return HJBCandidate(value, bundle, name="pathwise-defective")


def probes(grid: TimeGrid, count: int = 100, seed: int = 0, short_branch: bool = True) -> ProbeSet:
    """Probes ``(t, x, w = W(t))``; with ``short_branch`` the ``x`` keep ``X(T) < 1`` reachable only from below."""
    rng = np.random.default_rng(seed)
    W = brownian_batch(grid, 1, seed, range(count))
    k = rng.integers(0, grid.N, size=count)
    rows = np.arange(count)
    x = np.empty(count)
    for r in rows:
        A1, I = _reach(grid.points[k[r]], 1.0, W[r, :, 0], grid)
        cap = max(0.0, (1.0 - I) / A1) if short_branch else 2.0
        x[r] = rng.uniform(0.0, 1.0) * cap
    y = np.stack([x, W[rows, k, 0]], axis=1)
    # Terminal states stay on the X(T) <= 1 side where the branch formula applies.
    yT = np.stack([rng.uniform(0.0, 1.0, count), W[rows, -1, 0]], axis=1)
    return ProbeSet(grid, W, k, y, yT, seed)


# ---------------------------------------------------------------- experiments

def stratonovich_solve(x0: float, phi: float, W: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Solver run from ``t = 0`` with constant control and the Stratonovich second level."""
    sol = simulate(problem(grid.T), constant_control(phi), W, grid, 0, [x0, 0.0])
    return sol.Y


def _select(grid, seed, x, branch, paths, pool):
    W = brownian_batch(grid, 1, seed, range(pool))
    picked, info = [], []
    for m in range(pool):
        vc = value_and_control(0.0, x, W[m, :, 0], grid)
        if vc["branch"] == branch and not vc["clipped"]:
            picked.append(m)
            info.append(vc)
        if len(picked) == paths:
            break
    return W[picked], info, picked


def reachable_check(T: float = 1.0, N: int = 4096, paths: int = 20, seed: int = 0, x: float = 0.0) -> dict:
    """Drive ``X`` with the constant optimal control on reachable paths; report ``|X(T) - 1|``."""
    grid = make_uniform_grid(T, N)
    W, info, used = _select(grid, seed, x, "reachable", paths, 20 * paths)
    phis = np.array([vc["phi"] for vc in info])
    Xf = np.array([solution_formula(0.0, x, ph, W[r, :, 0], grid)[-1] for r, ph in enumerate(phis)])
    ctl = FeedbackControl(lambda k, t, y, ctx: phis[:, None])
    Xs = simulate(problem(T), ctl, W, grid, 0, [x, 0.0]).Y[:, -1, 0]
    return {"paths": len(used), "max_err_formula": float(np.max(np.abs(Xf - 1.0), initial=0.0)),
            "max_err_solver": float(np.max(np.abs(Xs - 1.0), initial=0.0)), "samples": used}


def short_branch_check(T: float = 0.5, N: int = 4096, paths: int = 50, seed: int = 1, x: float = 0.0) -> dict:
    """On ``A + I < 1`` paths compare the value formula with the simulated cost of full speed."""
    grid = make_uniform_grid(T, N)
    W, info, used = _select(grid, seed, x, "short", paths, 20 * paths)
    X = stratonovich_solve(x, 1.0, W, grid)[:, -1, 0]
    gaps = np.abs(np.abs(X - 1.0) - np.array([vc["value"] for vc in info]))
    return {"paths": len(used), "max_gap": float(np.max(gaps, initial=0.0)), "samples": used}


def transport_counterexample(T: float = 0.5, N: int = 1024, samples: int = 1000, seed: int = 2,
                             probe_count: int = 50) -> dict:
    """Residuals of ``u = 1 - x - (T - t)`` and the value it claims against the true value.

    Value comparison at ``(t, x) = (0, 0)``: the claim ``1 - T`` against
    ``[1 - int_0^T e^{W(T) - W(r)} dr]^+`` per path, and a dominance check against
    the simulated cost of full speed (sense ``minimize``).
    """
    grid = make_uniform_grid(T, N)
    prob = problem(T)
    bad = defective_candidate(T)
    pr = probes(grid, probe_count, seed, short_branch=False)
    res = hjb_residuals(bad, prob, pr, mode="state")
    W = brownian_batch(grid, 1, seed + 1, range(samples))
    true = np.array([value_and_control(0.0, 0.0, W[m, :, 0], grid)["value"] for m in range(samples)])
    claim = 1.0 - T
    diff = claim - true
    mean = math.fsum(diff) / samples
    se = float(np.std(diff, ddof=1) / math.sqrt(samples))
    costs = np.array([abs(solution_formula(0.0, 0.0, 1.0, W[m, :, 0], grid)[-1] - 1.0)
                      for m in range(samples)])
    dom = dominance_check(claim, {"phi=1": (math.fsum(costs) / samples,
                                            float(np.std(costs, ddof=1) / math.sqrt(samples)))},
                          sense="minimize")
    return {
        "T": T,
        "parabolic_max": res.summary()["parabolic"]["max"],
        "transport_max": res.summary()["transport"]["max"],
        "transport_equals_minus_x": bool(np.allclose(res.transport[:, 0], -pr.y[:, 0], atol=1e-14)),
        "claimed_value": claim,
        "true_value_mean": float(math.fsum(true) / samples),
        "mismatch_mean": mean,
        "mismatch_stderr": se,
        "mismatch_significant": bool(abs(mean) > 3 * se),
        "dominance": dom.to_dict(),
    }
