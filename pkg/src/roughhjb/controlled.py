"""Controlled rough paths, compensated Riemann sums and composition.

Shapes: a controlled path has values ``(N+1, *shape)`` and a Gubinelli
derivative ``(N+1, *shape, d)``; the last axis pairs with increments of the
reference path. For integration the trailing value axis must itself be ``d``
(the integrand is a linear map acting on ``dX``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import zeta

from .errors import InvalidArgument
from .grid_paths import SamplePath, holder_quotient, pairwise_holder
from .roughpath import RoughPath


@dataclass(frozen=True)
class ControlledPath:
    values: np.ndarray
    deriv: np.ndarray
    reference: RoughPath

    def __post_init__(self):
        Y = np.asarray(self.values, dtype=float)
        Yp = np.asarray(self.deriv, dtype=float)
        N, d = self.reference.grid.N, self.reference.d
        if Y.shape[0] != N + 1:
            raise InvalidArgument("controlled path and reference live on different grids")
        if Yp.shape != Y.shape + (d,):
            raise InvalidArgument(f"derivative must have shape {Y.shape + (d,)}, got {Yp.shape}")
        object.__setattr__(self, "values", Y)
        object.__setattr__(self, "deriv", Yp)

    @property
    def grid(self):
        return self.reference.grid

    @property
    def shape(self):
        return self.values.shape[1:]

    def remainder_idx(self, j, k) -> np.ndarray:
        dX = self.reference.increment(j, k)
        return self.values[k] - self.values[j] - _apply(self.deriv[j], dX, len(self.shape))

    def holder(self, alpha: float) -> float:
        return holder_quotient(self.values, self.grid.points, alpha)[0]

    def deriv_holder(self, beta: float) -> float:
        return holder_quotient(self.deriv, self.grid.points, beta)[0]

    def remainder_holder(self, exponent: float) -> float:
        flat = len(self.shape)

        def inc(j, k):
            R = self.remainder_idx(j, k)
            return np.sqrt(np.sum(R ** 2, axis=tuple(range(-flat, 0)))) if flat else np.abs(R)

        return pairwise_holder(inc, self.grid.points, exponent)[0]

    def __add__(self, other: "ControlledPath") -> "ControlledPath":
        _same_reference(self, other)
        return ControlledPath(self.values + other.values, self.deriv + other.deriv, self.reference)

    def scaled(self, c: float) -> "ControlledPath":
        return ControlledPath(c * self.values, c * self.deriv, self.reference)


def _apply(Yp, dX, nshape):
    """Contract the trailing ``d`` axis of ``Yp`` (index-batched) with ``dX``."""
    # Yp: (..., *shape, d); dX: (..., d)
    dX = dX.reshape(dX.shape[:-1] + (1,) * nshape + dX.shape[-1:])
    return np.sum(Yp * dX, axis=-1)


def _same_reference(a: ControlledPath, b: ControlledPath):
    if a.reference.grid != b.reference.grid:
        raise InvalidArgument("controlled paths refer to different grids")


def remainder(cp: ControlledPath, s: float, t: float) -> np.ndarray:
    """``Y(t) - Y(s) - Y'(s)(X(t) - X(s))``."""
    j, k = cp.grid.index(s), cp.grid.index(t)
    if j > k:
        raise InvalidArgument("need s <= t")
    return cp.remainder_idx(j, k)


def sewing_constant(theta: float) -> float:
    """Discrete sewing constant ``2^theta * zeta(theta)`` for ``theta > 1``."""
    if theta <= 1:
        return math.inf
    return 2.0 ** theta * float(zeta(theta))


@dataclass
class IntegralResult:
    value: np.ndarray
    local_bound: float  # bound on |integral - first-order germ over [s,t]|
    constant: float
    theta: float
    reliable: bool
    quotients: dict


def _germs(cp: ControlledPath, rp: RoughPath, j: np.ndarray, k: np.ndarray) -> np.ndarray:
    """``Y(u)(X(v)-X(u)) + Y'(u) XX(u,v)`` for index arrays ``j -> k``."""
    Y, Yp = cp.values[j], cp.deriv[j]
    dX = rp.increment(j, k)
    XX = rp.area(j, k)  # XX[a, b] = int (X^a - X^a(u)) dX^b
    lead = Y.ndim - 2
    first = _apply(Y, dX, lead)
    # Y'[..., b, a] pairs with XX[a, b]
    XXt = np.swapaxes(XX, -1, -2)
    XXt = XXt.reshape(XXt.shape[:1] + (1,) * lead + XXt.shape[1:])
    second = np.sum(Yp * XXt, axis=(-2, -1))
    return first + second


def rough_integral(cp: ControlledPath, rp: RoughPath, s: float, t: float,
                   beta: float | None = None, with_bound: bool = True) -> IntegralResult:
    """Compensated Riemann sum of ``Y dX`` over the grid intervals of ``[s, t]``.

    ``local_bound`` is ``C (|X|_a |R|_{a+b} + |XX|_{2a} |Y'|_b) |t-s|^{2a+b}`` with
    the sewing constant ``C`` and Hölder quotients measured on the data.
    """
    if cp.reference.grid != rp.grid:
        raise InvalidArgument("integrand and driver live on different grids")
    if cp.values.shape[-1] != rp.d:
        raise InvalidArgument("integrand's trailing axis must match the driver dimension")
    j0, k0 = rp.grid.index(s), rp.grid.index(t)
    if j0 > k0:
        raise InvalidArgument("need s <= t")
    alpha = rp.alpha
    beta = alpha if beta is None else beta
    theta = 2 * alpha + beta
    idx = np.arange(j0, k0)
    germs = _germs(cp, rp, idx, idx + 1)
    value = math_fsum(germs) if germs.size else np.zeros(cp.values.shape[1:-1])
    C = sewing_constant(theta)
    quot = {}
    bound = math.nan
    if with_bound:
        sub = slice(j0, k0 + 1)
        times = rp.times[sub]
        Xq = holder_quotient(rp.base.values[sub], times, alpha)[0]
        XXq = pairwise_holder(lambda a, b: np.linalg.norm(rp.area(a + j0, b + j0), axis=(-2, -1)),
                              times, 2 * alpha)[0]
        sub_cp = ControlledPath(cp.values[sub], cp.deriv[sub], _restrict(rp, j0, k0))
        Rq = sub_cp.remainder_holder(alpha + beta)
        Ypq = holder_quotient(cp.deriv[sub], times, beta)[0]
        quot = {"X": Xq, "XX": XXq, "R": Rq, "Yprime": Ypq}
        bound = C * (Xq * Rq + XXq * Ypq) * (t - s) ** theta
    return IntegralResult(value, bound, C, theta, theta > 1, quot)


def math_fsum(arr: np.ndarray) -> np.ndarray:
    """Exactly rounded sum along axis 0, independent of any blocking."""
    arr = np.asarray(arr)
    if arr.ndim == 1:
        return np.array(math.fsum(arr))
    flat = arr.reshape(arr.shape[0], -1)
    return np.array([math.fsum(flat[:, i]) for i in range(flat.shape[1])]).reshape(arr.shape[1:])


def _restrict(rp: RoughPath, j0: int, k0: int) -> RoughPath:
    from .grid_paths import TimeGrid
    times = rp.times[j0:k0 + 1] - rp.times[j0]
    base = SamplePath(TimeGrid(times), rp.base.values[j0:k0 + 1])
    return RoughPath(base, rp.levy[j0:k0], rp.alpha, rp.lift_rule)


def germ_defect(cp: ControlledPath, rp: RoughPath, s: float, t: float) -> np.ndarray:
    """``int_s^t Y dX - Y(s)(X(t)-X(s)) - Y'(s) XX(s,t)``."""
    j, k = rp.grid.index(s), rp.grid.index(t)
    whole = rough_integral(cp, rp, s, t, with_bound=False).value
    return whole - _germs(cp, rp, np.array([j]), np.array([k]))[0]


def integral_path(cp: ControlledPath, rp: RoughPath) -> ControlledPath:
    """``(int_0^. Y dX, Y)`` as a controlled path (integrand with vector output)."""
    N = rp.grid.N
    idx = np.arange(N)
    germs = _germs(cp, rp, idx, idx + 1)
    Z = np.zeros((N + 1,) + germs.shape[1:])
    np.cumsum(germs, axis=0, out=Z[1:])
    return ControlledPath(Z, cp.values, rp)


def compose_smooth(f, grad_f, cp: ControlledPath) -> ControlledPath:
    """``(f(Y), grad f(Y) Y')`` for ``f : R^n -> R^{shape}``, ``Y`` vector-valued.

    ``grad_f(y)`` returns an array of shape ``out_shape + (n,)``.
    """
    Y = cp.values
    if Y.ndim != 2:
        raise InvalidArgument("composition expects a vector-valued controlled path")
    n = Y.shape[1]
    fY = np.array([np.asarray(f(y), dtype=float) for y in Y])
    G = np.array([np.asarray(grad_f(y), dtype=float) for y in Y])
    if G.shape != fY.shape + (n,):
        raise InvalidArgument(f"gradient shape {G.shape[1:]} does not match f output {fY.shape[1:]} x {n}")
    deriv = np.einsum("k...n,knd->k...d", G, cp.deriv)
    return ControlledPath(fY, deriv, cp.reference)


def identity_controlled(rp: RoughPath) -> ControlledPath:
    """``(X, I)``."""
    X = rp.base.values
    return ControlledPath(X.copy(), np.broadcast_to(np.eye(rp.d), (X.shape[0], rp.d, rp.d)).copy(), rp)
