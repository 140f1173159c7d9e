"""Rough functional Itô decomposition along RDE solutions.

For ``F(t, y, z)`` with ``y`` the current state and ``z`` the causal path
``W o tau``, the telescoping sum ``F(T) - F(0)`` is split into

    int DF dt + int H dt + (rough integral against W) + (Itô integral against W o tau)

with ``H = <grad_y F, b> + 1/2 [tr(f^T hess_y F f) + tr(hess_z F) tau']``. All terms
use left points of the same grid.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidArgument, UnsupportedFunctional
from .rde import Coefficients
from .roughpath import RoughPath
from .timechange import TimeChange, time_changed_values


@dataclass
class PathFunctional:
    """Trajectory-vectorised ``F(t, y, z)``.

    Every evaluator maps ``(times[K], Y[K, n], Z[K, d])`` to one entry per index
    ``k``; entry ``k`` may read ``Z[:k+1]`` only (causality contract, audited by
    :func:`audit_trajectory_causality`). Shapes: ``value``/``D`` -> ``(K,)``,
    ``grad_y`` -> ``(K, n)``, ``hess_y`` -> ``(K, n, n)``, ``grad_z`` -> ``(K, d)``,
    ``hess_z`` -> ``(K, d, d)``, ``mixed_yz`` -> ``(K, n, d)``.
    """

    value: Callable
    D: Callable | None = None
    grad_y: Callable | None = None
    hess_y: Callable | None = None
    grad_z: Callable | None = None
    hess_z: Callable | None = None
    mixed_yz: Callable | None = None
    name: str = ""


@dataclass
class ItoDecomposition:
    lhs: float
    time_term: float
    drift_term: float
    rough_term: float
    ito_term: float
    residual: float
    mixed_term: float | None = None
    details: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("lhs", "time_term", "drift_term", "rough_term", "ito_term", "residual", "mixed_term")}


def drift_H(grad_y, hess_y, hess_z, b_val, f_val, dtau) -> np.ndarray:
    """``<grad_y F, b> + 1/2 [tr(f^T hess_y F f) + tr(hess_z F) tau']``, batched over a leading axis.

    ``grad_y`` (K, n), ``hess_y`` (K, n, n) or ``None``, ``hess_z`` (K, d, d) or
    ``None``, ``b_val`` (K, n), ``f_val`` (K, n, d), ``dtau`` (K,).
    """
    if hess_y is None:
        raise UnsupportedFunctional("second state derivative required for H")
    first = np.einsum("ki,ki->k", grad_y, b_val)
    trace_y = np.einsum("kad,kab,kbd->k", f_val, hess_y, f_val)
    trace_z = 0.0 if hess_z is None else np.trace(hess_z, axis1=1, axis2=2) * dtau
    return first + 0.5 * (trace_y + trace_z)


def rough_term_sum(grad_y, hess_y, f_val, milstein, dW, levy) -> np.ndarray:
    """Per-interval compensated summands of the rough integral.

    ``milstein`` is ``(K, n, d, d)`` indexed ``[i, k, j]`` (``grad f . f``) or ``None``.
    Second-derivative pairings use ``Sym(levy)``.
    """
    inc = np.einsum("kad,kd->ka", f_val, dW)
    first = np.einsum("ka,ka->k", grad_y, inc)
    sym = 0.5 * (levy + np.swapaxes(levy, 1, 2))
    second = 0.0
    if hess_y is not None:
        fWf = np.einsum("kad,kde,kbe->kab", f_val, sym, f_val)
        second = np.einsum("kab,kab->k", hess_y, fWf)
    third = 0.0
    if milstein is not None:
        third = np.einsum("ki,kimj,kjm->k", grad_y, milstein, levy)
    return first + second + third


def ito_term(integrand: np.ndarray, Wtau: np.ndarray) -> float:
    """Left-point sum of ``integrand[k] . (Wtau[k+1] - Wtau[k])``."""
    integrand = np.asarray(integrand, float)
    Wtau = np.asarray(Wtau, float)
    if Wtau.ndim == 1:
        Wtau = Wtau[:, None]
    if integrand.ndim == 1:
        integrand = integrand.reshape(-1, Wtau.shape[1]) if integrand.size != Wtau.shape[0] - 1 \
            else integrand[:, None]
    inc = np.diff(Wtau, axis=0)
    return float(np.sum(integrand[: inc.shape[0]] * inc))


def decompose_arrays(F: PathFunctional, coeffs: Coefficients, times: np.ndarray, Y: np.ndarray,
                     phi: np.ndarray, dW: np.ndarray, levy: np.ndarray, Wtau: np.ndarray,
                     tc: TimeChange, with_mixed: bool = False) -> ItoDecomposition:
    """Decomposition for one trajectory given as arrays on a common grid."""
    N = times.size - 1
    if Y.shape[0] != N + 1 or dW.shape[0] != N or Wtau.shape[0] != N + 1:
        raise InvalidArgument("trajectory arrays do not share the grid")
    if F.D is None or F.grad_y is None:
        raise UnsupportedFunctional(f"{F.name or 'functional'} lacks D or grad_y")
    left = slice(0, N)
    t = times[left]
    Yl, Zfull = Y[left], Wtau
    vals = F.value(times, Y, Zfull)
    lhs = float(vals[-1] - vals[0])
    dt = np.diff(times)
    # Evaluators get the full arrays; entry k only reads up to index k.
    DF = F.D(times, Y, Zfull)[left]
    gy = F.grad_y(times, Y, Zfull)[left]
    hy = F.hess_y(times, Y, Zfull)[left] if F.hess_y is not None else None
    hz = F.hess_z(times, Y, Zfull)[left] if F.hess_z is not None else None
    gz = F.grad_z(times, Y, Zfull)[left] if F.grad_z is not None else None
    fv = coeffs.f(Yl)
    bv = coeffs.b(t[:, None], Yl, phi[left])
    H = drift_H(gy, hy, hz, bv, fv, tc.dtau(t))
    time_term = float(np.sum(DF * dt))
    drift_term = float(np.sum(H * dt))
    mil = coeffs.milstein(Yl, fv)
    rough = float(np.sum(rough_term_sum(gy, hy, fv, mil, dW, levy)))
    ito = 0.0 if gz is None else ito_term(gz, Wtau)
    residual = lhs - (time_term + drift_term + rough + ito)
    mixed = None
    if with_mixed and F.mixed_yz is not None:
        mx = F.mixed_yz(times, Y, Zfull)[left]
        mixed = float(np.einsum("kad,ka,kd->", mx, np.diff(Y, axis=0), np.diff(Wtau, axis=0)))
    return ItoDecomposition(lhs, time_term, drift_term, rough, ito, residual, mixed)


def decompose(F: PathFunctional, sol, rp: RoughPath, tc: TimeChange, ctrl=None,
              coeffs: Coefficients | None = None, with_mixed: bool = False) -> ItoDecomposition:
    """Decomposition along an :class:`~roughhjb.rde.RDESolution` driven by ``rp``."""
    if coeffs is None:
        raise InvalidArgument("coefficients are required to evaluate H and the rough term")
    times = rp.times
    W = rp.base.values
    Wtau = time_changed_values(W, tc, rp.grid)
    phi = sol.control.values if ctrl is None else np.asarray(
        getattr(ctrl, "values", ctrl), float)
    if phi.ndim == 1:
        phi = phi[:, None]
    return decompose_arrays(F, coeffs, times, sol.Y, phi, np.diff(W, axis=0), rp.levy, Wtau, tc,
                            with_mixed)


def audit_trajectory_causality(fn: Callable, times, Y, Z, k: int, trials: int = 3, seed: int = 0) -> bool:
    """Entry ``k`` of ``fn(times, Y, Z)`` must not move when ``Z`` changes after ``k``."""
    ref = np.asarray(fn(times, Y, Z))[k]
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        Zp = np.array(Z, float, copy=True)
        Zp[k + 1:] += rng.standard_normal(Zp[k + 1:].shape)
        Yp = np.array(Y, float, copy=True)
        Yp[k + 1:] += rng.standard_normal(Yp[k + 1:].shape)
        if not np.allclose(np.asarray(fn(times, Yp, Zp))[k], ref, rtol=0, atol=1e-12):
            return False
    return True


# ------------------------------------------------------------- test functionals

def linear_state_functional(n: int = 1) -> PathFunctional:
    """``F(t, y, z) = y_1``."""
    e = np.eye(n)[0]
    return PathFunctional(
        value=lambda t, Y, Z: Y[:, 0].copy(),
        D=lambda t, Y, Z: np.zeros(t.size),
        grad_y=lambda t, Y, Z: np.broadcast_to(e, (t.size, n)).copy(),
        hess_y=lambda t, Y, Z: np.zeros((t.size, n, n)),
        name="linear")


def square_state_functional(n: int = 1) -> PathFunctional:
    """``F(t, y, z) = |y|^2``."""
    return PathFunctional(
        value=lambda t, Y, Z: np.sum(Y ** 2, axis=1),
        D=lambda t, Y, Z: np.zeros(t.size),
        grad_y=lambda t, Y, Z: 2 * Y,
        hess_y=lambda t, Y, Z: np.broadcast_to(2 * np.eye(n), (t.size, n, n)).copy(),
        name="square")


def product_functional() -> PathFunctional:
    """``F(t, y, z) = y_1 z_1(t)``: exercises the Itô term and the mixed block."""
    return PathFunctional(
        value=lambda t, Y, Z: Y[:, 0] * Z[:, 0],
        D=lambda t, Y, Z: np.zeros(t.size),
        grad_y=lambda t, Y, Z: np.concatenate([Z[:, :1], np.zeros((t.size, Y.shape[1] - 1))], axis=1),
        hess_y=lambda t, Y, Z: np.zeros((t.size, Y.shape[1], Y.shape[1])),
        grad_z=lambda t, Y, Z: np.concatenate([Y[:, :1], np.zeros((t.size, Z.shape[1] - 1))], axis=1),
        hess_z=lambda t, Y, Z: np.zeros((t.size, Z.shape[1], Z.shape[1])),
        mixed_yz=lambda t, Y, Z: np.einsum("a,d,k->kad", np.eye(Y.shape[1])[0], np.eye(Z.shape[1])[0],
                                           np.ones(t.size)),
        name="product")


def running_square_functional() -> PathFunctional:
    """``F(t, y, z) = int_0^t z(s)^2 ds + z(t)^2``: causal in ``z`` with ``D = z(t)^2``."""

    def value(t, Y, Z):
        z2 = Z[:, 0] ** 2
        run = np.concatenate([[0.0], np.cumsum(0.5 * (z2[1:] + z2[:-1]) * np.diff(t))])
        return run + z2

    return PathFunctional(
        value=value,
        D=lambda t, Y, Z: Z[:, 0] ** 2,
        grad_y=lambda t, Y, Z: np.zeros((t.size, Y.shape[1])),
        hess_y=lambda t, Y, Z: np.zeros((t.size, Y.shape[1], Y.shape[1])),
        grad_z=lambda t, Y, Z: 2 * Z[:, :1],
        hess_z=lambda t, Y, Z: np.full((t.size, 1, 1), 2.0),
        name="running-square")


FUNCTIONALS = {
    "linear": linear_state_functional,
    "square": square_state_functional,
    "product": product_functional,
    "running-square": running_square_functional,
}


def brownian_fine_lifts(grid, d: int, seeds, oversample: int = 4):
    """Increments ``(S, N, d)``, Lévy blocks and coarse paths for one lift per seed.

    Row ``s`` is the lift :func:`~roughhjb.roughpath.brownian_rough_path` builds for ``seeds[s]``.
    """
    from .grid_paths import TimeGrid, brownian_batch
    from .roughpath import ito_levy_batch
    frac = np.arange(oversample) / oversample
    fine = TimeGrid(np.append((grid.points[:-1, None] + grid.steps[:, None] * frac).ravel(), grid.T))
    paths = np.stack([brownian_batch(fine, d, int(s), [0])[0] for s in seeds])
    dX, levy = ito_levy_batch(paths, oversample)
    return dX, levy, paths[:, ::oversample]


def decompose_seeds(F: PathFunctional, coeffs: Coefficients, grid, seeds, tc: TimeChange, y0,
                    oversample: int = 4, control=None) -> list[ItoDecomposition]:
    """One decomposition per seed; all seeds share a single batched solve."""
    from .errors import DivergenceError
    from .rde import solve_batch
    seeds = list(seeds)
    dX, levy, W = brownian_fine_lifts(grid, coeffs.d, seeds, oversample)
    sol = solve_batch(coeffs, control, grid.points, dX, levy, 0, y0)
    if sol.diverged.any():
        r = int(np.argmax(sol.diverged))
        raise DivergenceError(f"seed {seeds[r]} went non-finite after index {sol.last_valid[r]}",
                              int(sol.last_valid[r]))
    out = []
    for r in range(len(seeds)):
        Wtau = time_changed_values(W[r], tc, grid)
        out.append(decompose_arrays(F, coeffs, grid.points, sol.Y[r], sol.phi[r], dX[r], levy[r], Wtau, tc))
    return out
