"""Insider trading with full knowledge of ``W`` and quadratic transaction costs.

State ``y = (x, Phi, w, r)``: wealth, shares, current noise value and the
accumulated cost ``r = -eps int phi^2``. The running cost enters through ``r``
so that the Hamiltonian is ``sup_phi {phi dPhi u - eps phi^2}`` and the reward
is ``x + r``. With ``delta(t) = W(T) - W(t)`` the value is

    v = x + delta(t) Phi + c int_t^T delta(s)^2 ds,    c = 1 / (4 eps).

``PRINTED_FACTOR`` keeps the coefficient ``3 / (4 eps)`` for comparison; with
it the parabolic residual is ``-delta^2 / (2 eps)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize

from ..errors import InvalidArgument
from ..grid_paths import TimeGrid, brownian_batch
from ..hjb import CandidateBundle, ControlProblem, HJBCandidate, ProbeSet, hjb_residuals
from ..rde import Coefficients
from ..timechange import full_knowledge

PRINTED_FACTOR = 3.0
CORRECT_FACTOR = 1.0


@dataclass(frozen=True)
class InsiderParams:
    eps: float = 0.5
    sigma0: float = 0.2
    T: float = 1.0

    def __post_init__(self):
        if self.eps <= 0 or self.sigma0 <= 0 or self.T <= 0:
            raise InvalidArgument("eps, sigma0 and T must be positive")

    def coefficient(self, factor: float = CORRECT_FACTOR) -> float:
        return factor / (4 * self.eps)


def coefficients(p: InsiderParams) -> Coefficients:
    """The ``W``-driven part; the ``B`` noise only adds ``sigma0^2 Phi^2 d_xx u / 2``."""

    def b(t, y, phi):
        q = phi[:, 0]
        z = np.zeros_like(q)
        return np.stack([z, q, z, -p.eps * q * q], axis=1)

    def f(y):
        out = np.zeros(y.shape[:-1] + (4, 1))
        out[..., 0, 0] = y[..., 1]
        out[..., 2, 0] = 1.0
        return out

    def gradf(y):
        out = np.zeros(y.shape[:-1] + (4, 1, 4))
        out[..., 0, 0, 1] = 1.0
        return out

    return Coefficients(b=b, f=f, gradf=gradf, n=4, d=1, m=1, name="insider")


def problem(p: InsiderParams) -> ControlProblem:
    return ControlProblem(coefficients(p), lambda Y: Y[..., 0] + Y[..., 3], full_knowledge(p.T),
                          convention="stratonovich", name="insider")


def _tail(k, grid, W):
    """``delta(t_k)`` and ``int_{t_k}^T delta^2`` (trapezoid) per probe."""
    W = W[..., 0] if W.ndim == 3 else W
    d = W[:, -1:] - W
    cum = np.concatenate([np.zeros((W.shape[0], 1)),
                          integrate.cumulative_trapezoid(d * d, grid.points, axis=1)], axis=1)
    rows = np.arange(W.shape[0])
    return d[rows, k], cum[:, -1] - cum[rows, k]


def value(t: float, x: float, Phi: float, W: np.ndarray, grid: TimeGrid, p: InsiderParams,
          factor: float = CORRECT_FACTOR) -> float:
    k = grid.index(t)
    d, q = _tail(np.array([k]), grid, np.asarray(W, float).reshape(1, -1))
    return float(x + d[0] * Phi + p.coefficient(factor) * q[0])


def candidate(p: InsiderParams, factor: float = CORRECT_FACTOR) -> HJBCandidate:
    """``u(t, x, Phi, w, r) = x + r + (W(T) - w) Phi + c int_t^T delta^2``."""
    c = p.coefficient(factor)

    def val(k, grid, Y, W):
        _, q = _tail(np.asarray(k), grid, W)
        return Y[:, 0] + Y[:, 3] + (W[:, -1, 0] - Y[:, 2]) * Y[:, 1] + c * q

    def bundle(k, grid, Y, W):
        k = np.asarray(k)
        d_t, q = _tail(k, grid, W)
        P = Y.shape[0]
        Phi, w = Y[:, 1], Y[:, 2]
        grad = np.stack([np.ones(P), W[:, -1, 0] - w, -Phi, np.ones(P)], axis=1)
        hess = np.zeros((P, 4, 4))
        hess[:, 1, 2] = hess[:, 2, 1] = -1.0
        return CandidateBundle(value=val(k, grid, Y, W), D=-c * d_t ** 2, grad_y=grad, hess_y=hess)

    return HJBCandidate(val, bundle, name=f"insider(c={c:g})")


def probes(p: InsiderParams, grid: TimeGrid, count: int = 100, seed: int = 0) -> ProbeSet:
    rng = np.random.default_rng(seed)
    W = brownian_batch(grid, 1, seed, range(count))
    k = rng.integers(0, grid.N, size=count)
    rows = np.arange(count)
    x, Phi, r = rng.standard_normal((3, count))
    y = np.stack([x, Phi, W[rows, k, 0], r], axis=1)
    yT = np.stack([x, Phi, W[rows, -1, 0], r], axis=1)
    return ProbeSet(grid, W, k, y, yT, seed)


def residual_check(p: InsiderParams, grid: TimeGrid, count: int = 100, seed: int = 0,
                   factor: float = CORRECT_FACTOR) -> dict:
    """Residuals of the insider system at random probes, including the ``B``-noise term."""
    pr = probes(p, grid, count, seed)
    cand = candidate(p, factor)
    rep = hjb_residuals(cand, problem(p), pr, mode="state")
    B = cand.bundle(pr.k, grid, pr.y, pr.W)
    extra = 0.5 * p.sigma0 ** 2 * pr.y[:, 1] ** 2 * B.hess_y[:, 0, 0]
    parabolic = rep.parabolic + extra
    d_t, _ = _tail(pr.k, grid, pr.W)
    return {
        "factor": factor,
        "parabolic_max": float(np.max(np.abs(parabolic))),
        "parabolic": parabolic,
        "predicted": (1.0 - factor) * d_t ** 2 / (4 * p.eps),
        "transport_max": float(np.max(np.abs(rep.transport))),
        "terminal_max": float(np.max(np.abs(rep.terminal))),
        "phi_star": rep.phi_star[:, 0],
        "phi_expected": d_t / (2 * p.eps),
    }


def insider_value_and_check(t: float, x: float, Phi: float, W: np.ndarray, grid: TimeGrid,
                            p: InsiderParams, probes_count: int = 100, seed: int = 0) -> tuple[float, dict]:
    """Corrected value at ``(t, x, Phi)`` with residual reports for both coefficients."""
    v = value(t, x, Phi, W, grid, p)
    return v, {"corrected": residual_check(p, grid, probes_count, seed, CORRECT_FACTOR),
               "printed": residual_check(p, grid, probes_count, seed, PRINTED_FACTOR)}


def pathwise_optimum(t: float, x: float, Phi: float, W: np.ndarray, grid: TimeGrid, p: InsiderParams) -> dict:
    """Numerically maximise ``x + int Phi o dW - eps int phi^2`` over piecewise-constant ``phi``.

    The ``B`` integral has mean zero and drops out; the Stratonovich integral is
    the trapezoid sum of the piecewise-linear share path.
    """
    W = np.asarray(W, float).ravel()
    k = grid.index(t)
    dt = grid.steps[k:]
    dW = np.diff(W[k:])

    def neg(phi):
        shares = Phi + np.concatenate([[0.0], np.cumsum(phi * dt)])
        gain = np.sum(0.5 * (shares[1:] + shares[:-1]) * dW)
        return -(x + gain - p.eps * np.sum(phi * phi * dt))

    res = optimize.minimize(neg, np.zeros(dt.size), method="L-BFGS-B", options={"maxiter": 2000})
    return {"value": float(-res.fun), "phi": res.x, "success": bool(res.success)}
