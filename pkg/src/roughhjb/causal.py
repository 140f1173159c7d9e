"""Causal path functionals and their Dupire derivatives.

A :class:`CausalPath` is a piecewise-linear path through its knots, held
constant after the last knot at ``values[-1] + jump``. Stopping a path at ``t``
truncates the knots there; the vertical bump ``X_t + h 1_[t,T]`` is the jump.
Functionals take ``(t, paths, params)`` with ``paths`` a dict of named slots.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidArgument, OutOfDomain, UnsupportedConfiguration, UnsupportedFunctional
from .grid_paths import SamplePath
from .timechange import TimeChange

# Gauss-Legendre nodes on [0, 1] used for cell-wise quadrature.
_GL_X, _GL_W = np.polynomial.legendre.leggauss(3)
_GL_X = 0.5 * (_GL_X + 1.0)
_GL_W = 0.5 * _GL_W


@dataclass(frozen=True)
class CausalPath:
    times: np.ndarray
    values: np.ndarray
    jump: np.ndarray = field(default=None)

    def __post_init__(self):
        t = np.asarray(self.times, float)
        v = np.asarray(self.values, float)
        if v.ndim == 1:
            v = v[:, None]
        if t.ndim != 1 or v.shape[0] != t.size or t.size < 1:
            raise InvalidArgument("knot times and values disagree")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise InvalidArgument("knot times must increase")
        j = np.zeros(v.shape[1]) if self.jump is None else np.asarray(self.jump, float).reshape(v.shape[1])
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "jump", j)

    @classmethod
    def from_sample(cls, path: SamplePath, t: float | None = None) -> "CausalPath":
        cp = cls(path.times, path.values)
        return cp if t is None else cp.stopped(t)

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def end(self) -> float:
        return float(self.times[-1])

    @property
    def current(self) -> np.ndarray:
        """Value on ``[end, inf)`` (post-jump)."""
        return self.values[-1] + self.jump

    @property
    def has_jump(self) -> bool:
        return bool(np.any(self.jump != 0))

    def at(self, s) -> np.ndarray:
        """Right-continuous evaluation; ``s`` scalar -> ``(d,)``, array -> ``(k, d)``."""
        s = np.asarray(s, float)
        scalar = s.ndim == 0
        s = np.atleast_1d(s)
        out = np.empty((s.size, self.d))
        after = s >= self.end
        out[after] = self.current
        if np.any(~after):
            for i in range(self.d):
                out[~after, i] = np.interp(s[~after], self.times, self.values[:, i])
        return out[0] if scalar else out

    def stopped(self, t: float) -> "CausalPath":
        """Path frozen from ``t`` on (the jump is dropped if ``t`` precedes it)."""
        if t >= self.end:
            return self
        k = int(np.searchsorted(self.times, t, side="right"))
        times = self.times[:k]
        vals = self.values[:k]
        if times.size == 0 or times[-1] < t:
            times = np.append(times, t)
            vals = np.vstack([vals, self.at(t)])
        return CausalPath(times, vals)

    def with_knot(self, t: float) -> "CausalPath":
        if t >= self.end or np.any(self.times == t):
            return self
        k = int(np.searchsorted(self.times, t))
        return CausalPath(np.insert(self.times, k, t), np.insert(self.values, k, self.at(t), axis=0),
                          self.jump)

    def bumped(self, h) -> "CausalPath":
        return CausalPath(self.times, self.values, self.jump + np.asarray(h, float).reshape(self.d))

    def integrate(self, g: Callable, a: float, b: float, weight: Callable | None = None) -> np.ndarray:
        """``int_a^b g(X(u)) w(u) du`` with 3-point Gauss-Legendre per cell.

        ``g`` maps an ``(q, d)`` array of path values to ``(q,)`` or ``(q, k)``.
        Inside each cell one-sided limits are used, so the jump at the end
        knot never enters the integral over cells that end there.
        """
        if b <= a:
            probe = g(self.current[None, :])
            return np.zeros(np.shape(probe)[1:])
        inner = self.times[(self.times > a) & (self.times < b)]
        edges = np.concatenate([[a], inner, [b]])
        if self.end > a and self.end < b and self.end not in inner:
            edges = np.sort(np.append(edges, self.end))
        lo, hi = edges[:-1], edges[1:]
        width = hi - lo
        nodes = lo[:, None] + width[:, None] * _GL_X[None, :]
        flat = nodes.ravel()
        vals = np.empty((flat.size, self.d))
        before = flat < self.end
        vals[~before] = self.current
        if before.any():
            for i in range(self.d):
                vals[before, i] = np.interp(flat[before], self.times, self.values[:, i])
        gv = np.asarray(g(vals), float)
        w = (width[:, None] * _GL_W[None, :]).ravel()
        if weight is not None:
            w = w * np.asarray(weight(flat), float)
        return np.tensordot(w, gv, axes=(0, 0))

    def perturbed_after(self, t: float, noise: np.ndarray) -> "CausalPath":
        """Add ``noise`` (one row per knot) to the knots strictly after ``t``."""
        base = self.with_knot(t)
        mask = base.times > t
        vals = base.values.copy()
        vals[mask] += noise[: mask.sum()]
        return CausalPath(base.times, vals, base.jump)


def as_paths(X) -> dict:
    if isinstance(X, dict):
        return {k: _as_causal(v) for k, v in X.items()}
    return {"x": _as_causal(X)}


def _as_causal(v):
    if isinstance(v, CausalPath):
        return v
    if isinstance(v, SamplePath):
        return CausalPath.from_sample(v)
    return v


@dataclass
class CausalFunctional:
    """Evaluator ``value(t, paths, params)`` with optional analytic derivatives.

    ``D``, ``grad[slot]``, ``hess[slot]`` and ``mixed[(slot_a, slot_b)]`` share
    the value's signature. ``reads_jump`` documents that the functional reads
    post-jump values at ``t``.
    """

    value: Callable
    slots: tuple = ("x",)
    D: Callable | None = None
    grad: dict = field(default_factory=dict)
    hess: dict = field(default_factory=dict)
    mixed: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    name: str = ""
    accepts_bumps: bool = True
    reads_jump: bool = True

    def __call__(self, t: float, X, params: dict | None = None) -> float:
        p = self.params if params is None else {**self.params, **params}
        return self.value(t, as_paths(X), p)

    def _analytic(self, kind, t, X, slot=None):
        table = {"D": self.D, "grad": self.grad.get(slot), "hess": self.hess.get(slot),
                 "mixed": self.mixed.get(slot)}
        fn = table[kind]
        if fn is None:
            raise UnsupportedFunctional(f"{self.name or 'functional'} has no analytic {kind}")
        return fn(t, as_paths(X), self.params)


@dataclass
class DerivativeBundle:
    DF: float | None
    grad: dict
    hess: dict
    mixed: dict = field(default_factory=dict)


def _stopped(paths: dict, t: float) -> dict:
    return {k: (v.stopped(t) if isinstance(v, CausalPath) else v) for k, v in paths.items()}


def _bump_size(x: np.ndarray, base: float) -> float:
    return base * (1.0 + float(np.linalg.norm(x)))


def vertical_derivative(F: CausalFunctional, t: float, X, slot: str = "x",
                        h: float | None = None, h2: float | None = None,
                        second: bool = True) -> tuple[np.ndarray, np.ndarray | None]:
    """Central differences in the bump ``X_t + h e_i 1_[t,T]`` (and second differences)."""
    if not F.accepts_bumps:
        raise UnsupportedFunctional(f"{F.name or 'functional'} rejects bumped (cadlag) input")
    paths = _stopped(as_paths(X), t)
    base = paths[slot]
    d = base.d
    h = _bump_size(base.current, 1e-5) if h is None else h
    h2 = _bump_size(base.current, 1e-3) if h2 is None else h2
    if h <= 0 or h2 <= 0:
        raise InvalidArgument("bump size must be positive")

    def ev(shift):
        q = dict(paths)
        q[slot] = base.bumped(shift)
        return F(t, q)

    E = np.eye(d)
    grad = np.array([(ev(h * E[i]) - ev(-h * E[i])) / (2 * h) for i in range(d)])
    if not second:
        return grad, None
    f0 = ev(np.zeros(d))
    hess = np.empty((d, d))
    for i in range(d):
        hess[i, i] = (ev(h2 * E[i]) - 2 * f0 + ev(-h2 * E[i])) / h2 ** 2
        for j in range(i + 1, d):
            v = (ev(h2 * (E[i] + E[j])) - ev(h2 * (E[i] - E[j]))
                 - ev(h2 * (E[j] - E[i])) + ev(-h2 * (E[i] + E[j]))) / (4 * h2 ** 2)
            hess[i, j] = hess[j, i] = v
    return grad, hess


def mixed_vertical_derivative(F: CausalFunctional, t: float, X, slot_a: str, slot_b: str,
                              h: float | None = None) -> np.ndarray:
    """``d^2 F / d h_a d h_b`` for bumps in two different slots."""
    paths = _stopped(as_paths(X), t)
    A, B = paths[slot_a], paths[slot_b]
    h = _bump_size(np.concatenate([A.current, B.current]), 1e-3) if h is None else h
    out = np.empty((A.d, B.d))
    for i in range(A.d):
        for j in range(B.d):
            acc = 0.0
            for sa, sb, sign in ((1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)):
                q = dict(paths)
                q[slot_a] = A.bumped(sa * h * np.eye(A.d)[i])
                q[slot_b] = B.bumped(sb * h * np.eye(B.d)[j])
                acc += sign * F(t, q)
            out[i, j] = acc / (4 * h * h)
    return out


@dataclass
class HorizontalEstimate:
    value: float
    estimates: list
    unstable: bool


def horizontal_derivative(F: CausalFunctional, t: float, X, h: float = 1e-6,
                          halvings: int = 3, tolerance: float = 0.1,
                          atol: float = 1e-8, T: float | None = None) -> HorizontalEstimate:
    """Right derivative of ``h -> F(t + h, X_t)``.

    One-sided quotients at ``h, h/2, ..., h/2^halvings``; the returned value is
    the Richardson combination of the two smallest steps. ``unstable`` is set
    when any halving moves the quotient by more than ``tolerance`` (relative).
    On grid paths the interpolant is differentiable inside a cell, so probing
    for non-differentiability needs ``h`` spanning several grid cells.
    """
    paths = as_paths(X)
    if T is None:
        T = F.params.get("T", max((p.end for p in paths.values() if isinstance(p, CausalPath)),
                                  default=t))
    if t >= T:
        raise OutOfDomain("no horizontal derivative at the terminal time")
    if h <= 0:
        raise InvalidArgument("step must be positive")
    if t + h > T:
        raise InvalidArgument("t + h exceeds the horizon")
    stopped = _stopped(paths, t)
    f0 = F(t, stopped)
    quot = [(F(t + h / 2 ** j, stopped) - f0) / (h / 2 ** j) for j in range(halvings + 1)]
    unstable = False
    for a, b in zip(quot, quot[1:]):
        change = abs(b - a)
        if change > atol and change > tolerance * max(abs(a), abs(b)):
            unstable = True
    value = 2 * quot[-1] - quot[-2] if len(quot) > 1 else quot[0]
    return HorizontalEstimate(float(value), [float(q) for q in quot], unstable)


def causality_audit(F, t: float, X, trials: int = 5, seed: int = 0, tol: float = 1e-12,
                    scale: float = 1.0) -> bool:
    """Perturb every slot strictly after ``t`` and check the value is unchanged.

    ``F`` may be a :class:`CausalFunctional` or any ``(t, paths, params)`` evaluator
    (e.g. a derivative).
    """
    paths = {k: (v.with_knot(t) if isinstance(v, CausalPath) else v) for k, v in as_paths(X).items()}
    call = F if isinstance(F, CausalFunctional) else (lambda s, q: F(s, q, {}))
    ref = np.asarray(call(t, paths), float)
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        q = {}
        for k, v in paths.items():
            if isinstance(v, CausalPath):
                noise = scale * rng.standard_normal(v.values.shape)
                q[k] = v.perturbed_after(t, noise)
            else:
                q[k] = v
        if np.any(np.abs(np.asarray(call(t, q), float) - ref) > tol * (1 + np.abs(ref))):
            return False
    return True


def derivative_bundle(F: CausalFunctional, t: float, X, numeric: bool = False) -> DerivativeBundle:
    """Analytic derivatives where provided (or all numeric when asked)."""
    grad, hess = {}, {}
    for slot in F.slots:
        if not numeric and slot in F.grad:
            grad[slot] = np.asarray(F._analytic("grad", t, X, slot), float)
            if slot in F.hess:
                hess[slot] = np.asarray(F._analytic("hess", t, X, slot), float)
        else:
            g, H = vertical_derivative(F, t, X, slot)
            grad[slot], hess[slot] = g, H
    if not numeric and F.D is not None:
        DF = float(F._analytic("D", t, X))
    else:
        DF = horizontal_derivative(F, t, X).value
    return DerivativeBundle(DF, grad, hess)


# ------------------------------------------------------------------ built-ins

def point_functional(f: Callable, grad_f: Callable, hess_f: Callable, name: str = "point") -> CausalFunctional:
    """``F(t, X) = f(X(t))``: ``grad F = grad f(X(t))``, ``DF = 0``."""
    return CausalFunctional(
        value=lambda t, P, p: float(f(P["x"].at(t))),
        D=lambda t, P, p: 0.0,
        grad={"x": lambda t, P, p: np.asarray(grad_f(P["x"].at(t)), float)},
        hess={"x": lambda t, P, p: np.asarray(hess_f(P["x"].at(t)), float)},
        name=name)


def running_integral(g: Callable, name: str = "running-integral") -> CausalFunctional:
    """``F(t, X) = int_0^t g(X(s)) ds``: ``grad F = 0``, ``DF = g(X(t))``."""

    def value(t, P, p):
        return float(P["x"].integrate(lambda v: g(v), 0.0, t))

    def zeros_grad(t, P, p):
        return np.zeros(P["x"].d)

    return CausalFunctional(
        value=value,
        D=lambda t, P, p: float(g(P["x"].at(t)[None, :])[0]),
        grad={"x": zeros_grad},
        hess={"x": lambda t, P, p: np.zeros((P["x"].d, P["x"].d))},
        name=name)


def windowed_integral(f: Callable, grad_f: Callable, hess_f: Callable, tc: TimeChange,
                      name: str = "windowed-integral") -> CausalFunctional:
    """``F(t, X) = int_{tau^{-1}(t)}^t f(X(t) - X(u)) tau'(u) du``.

    ``f`` maps ``(q, d)`` increments to ``(q,)``; ``grad_f`` to ``(q, d)``;
    ``hess_f`` to ``(q, d, d)``.
    """
    # Fail early when the inverse derivative is not available.
    probe = np.linspace(0.0, tc.T, 257)
    try:
        tc.dinverse(probe[probe > float(tc.tau(0.0))])
    except UnsupportedConfiguration:
        raise

    def lower(t):
        return float(tc.inverse(t))

    def integral(t, X, fn):
        xt = X.at(t)
        return X.integrate(lambda v: fn(xt[None, :] - v), lower(t), t, weight=tc.dtau)

    def value(t, P, p):
        return float(integral(t, P["x"], f))

    def D(t, P, p):
        X = P["x"]
        a = lower(t)
        f0 = float(f(np.zeros((1, X.d)))[0])
        edge = float(f((X.at(t) - X.at(a))[None, :])[0])
        return f0 * float(tc.dtau(t)) - edge * float(tc.dtau(a)) * float(tc.dinverse(t))

    return CausalFunctional(
        value=value,
        D=D,
        grad={"x": lambda t, P, p: np.asarray(integral(t, P["x"], grad_f), float)},
        hess={"x": lambda t, P, p: np.asarray(integral(t, P["x"], hess_f), float)},
        params={"T": tc.T},
        name=name)


def reconstruction_functional(tc: TimeChange, w: SamplePath, f: Callable | None = None,
                              grad_f: Callable | None = None,
                              name: str = "reconstruction") -> CausalFunctional:
    """``F(t, X, w) = X(t) - X(tau^{-1}(t v tau(0))) + w(tau(0)) - w(t ^ tau(0))``.

    With ``X = W o tau`` and ``w`` the initial segment this equals
    ``W(tau(t)) - W(t)``. The optional ``f`` is applied on top. The vertical
    derivative exists (``grad f`` of the reconstruction); a horizontal one in
    general does not, which :func:`horizontal_derivative` reports as instability.
    """
    tau0 = float(tc.tau(0.0))
    wpath = CausalPath.from_sample(w)

    def recon(t, X):
        back = float(tc.inverse(max(t, tau0)))
        return X.at(t) - X.at(back) + wpath.at(tau0) - wpath.at(min(t, tau0))

    def value(t, P, p):
        r = recon(t, P["x"])
        return float(f(r[None, :])[0]) if f is not None else float(r[0])

    grad = {}
    if f is None:
        grad["x"] = lambda t, P, p: np.eye(P["x"].d)[0]
    elif grad_f is not None:
        grad["x"] = lambda t, P, p: np.asarray(grad_f(recon(t, P["x"])[None, :])[0], float)
    return CausalFunctional(value=value, grad=grad, params={"T": tc.T}, name=name)


def terminal_value_functional() -> CausalFunctional:
    """``F(t, X) = X(T)``: anticipative, used to exercise the causality audit."""
    return CausalFunctional(value=lambda t, P, p: float(P["x"].values[-1, 0] + P["x"].jump[0]),
                            name="terminal-value")


def current_value_functional() -> CausalFunctional:
    return CausalFunctional(
        value=lambda t, P, p: float(P["x"].at(t)[0]),
        D=lambda t, P, p: 0.0,
        grad={"x": lambda t, P, p: np.eye(P["x"].d)[0]},
        hess={"x": lambda t, P, p: np.zeros((P["x"].d, P["x"].d))},
        name="current-value")
