"""Frontrunning with lookahead ``Delta``: exponential utility under temporary impact.

State ``y = (x, Phi, s)``: wealth, shares held and the current noise value.
Dynamics ``b = (-Lam phi^2 / 2, phi, 0)``, ``f = (Phi, 0, 1)``, reward
``g(y) = -exp(-x)``, information ``tau(t) = (t + Delta) ^ T``.

The candidate is ``u = -exp(-(x - Phi s + h))`` where, for the window
``[t, tau(t)]`` of length ``L`` and ``a = W(tau(t))``,

    C  = Phi + I1 / Lam,                                 I1 = int (a - W(r)) dr
    h  = Phi a + I2 / (2 Lam) - Ups C^2 / 2 + Delta Om / (2 Lam),   I2 = int (a - W(r))^2 dr

Window integrals are exact for the piecewise-linear interpolant of ``W``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate

from ..causal import CausalFunctional, CausalPath
from ..errors import InvalidArgument
from ..grid_paths import TimeGrid, brownian_batch
from ..hjb import CandidateBundle, ControlProblem, FeedbackControl, HJBCandidate, ProbeSet
from ..rde import Coefficients
from ..timechange import TimeChange, lookahead, tau_index


@dataclass(frozen=True)
class FrontrunnerParams:
    Lam: float = 1.0
    delta: float = 0.1
    T: float = 1.0
    Phi0: float = 0.0

    def __post_init__(self):
        if self.Lam <= 0 or self.T <= 0 or not (0 < self.delta < self.T):
            raise InvalidArgument("need Lam > 0, T > 0 and 0 < delta < T")

    @property
    def tc(self) -> TimeChange:
        return lookahead(self.delta, self.T)


def coefficients(p: FrontrunnerParams) -> Coefficients:
    Lam = p.Lam

    def b(t, y, phi):
        q = phi[:, 0]
        return np.stack([-0.5 * Lam * q ** 2, q, np.zeros_like(q)], axis=1)

    def f(y):
        out = np.zeros(y.shape[:-1] + (3, 1))
        out[..., 0, 0] = y[..., 1]
        out[..., 2, 0] = 1.0
        return out

    def gradf(y):
        out = np.zeros(y.shape[:-1] + (3, 1, 3))
        out[..., 0, 0, 1] = 1.0
        return out

    return Coefficients(b=b, f=f, gradf=gradf, n=3, d=1, m=1, name="frontrunner")


def reward(Y: np.ndarray) -> np.ndarray:
    return -np.exp(-np.asarray(Y, float)[..., 0])


def problem(p: FrontrunnerParams) -> ControlProblem:
    return ControlProblem(coefficients(p), reward, p.tc, name="frontrunner")


# -------------------------------------------------------------- Upsilon, Omega

def _remaining(t, p: FrontrunnerParams) -> np.ndarray:
    t = np.asarray(t, float)
    return (p.T - np.minimum(t + p.delta, p.T)) / np.sqrt(p.Lam)


def upsilon(t, p: FrontrunnerParams) -> np.ndarray:
    """``(Lam/Delta) / (1 + (sqrt(Lam)/Delta) coth(v))`` written via ``tanh`` so ``v = 0`` gives 0."""
    th = np.tanh(_remaining(t, p))
    return (p.Lam / p.delta) * th / (th + np.sqrt(p.Lam) / p.delta)


def upsilon_prime(t, p: FrontrunnerParams) -> np.ndarray:
    """Analytic left derivative in ``t`` (zero once the window reaches ``T``)."""
    t = np.asarray(t, float)
    v = _remaining(t, p)
    a = np.sqrt(p.Lam) / p.delta
    dv = (p.Lam / p.delta) * a / np.cosh(v) ** 2 / (np.tanh(v) + a) ** 2
    return np.where(t + p.delta <= p.T, -dv / np.sqrt(p.Lam), 0.0)


def _omega_integrand(u, p):
    return 1.0 / (1.0 + p.delta / np.sqrt(p.Lam) * np.tanh((p.T - u) / np.sqrt(p.Lam)))


def omega(t, p: FrontrunnerParams) -> np.ndarray:
    """``int_{tau(t)}^T du / (1 + (Delta/sqrt(Lam)) tanh((T-u)/sqrt(Lam)))`` by adaptive quadrature."""
    t = np.asarray(t, float)
    flat = np.atleast_1d(t).ravel()
    out = np.empty(flat.size)
    for i, s in enumerate(flat):
        lo = min(s + p.delta, p.T)
        out[i] = 0.0 if lo >= p.T else integrate.quad(_omega_integrand, lo, p.T, args=(p,),
                                                      epsabs=1e-13, epsrel=1e-12)[0]
    return out.reshape(t.shape) if t.ndim else float(out[0])


def omega_closed(t, p: FrontrunnerParams) -> np.ndarray:
    """Antiderivative form ``sqrt(Lam) [v - c log(cosh v + c sinh v)] / (1 - c^2)``, ``c != 1``."""
    c = p.delta / np.sqrt(p.Lam)
    if abs(1 - c) < 1e-8:
        raise InvalidArgument("closed form is singular at Delta = sqrt(Lam)")
    v = _remaining(t, p)
    # log(cosh v + c sinh v) = v + log((1 + c)/2 + (1 - c)/2 e^{-2v})
    lg = v + np.log(0.5 * (1 + c) + 0.5 * (1 - c) * np.exp(-2 * v))
    return np.sqrt(p.Lam) * (v - c * lg) / (1 - c * c)


def omega_prime(t, p: FrontrunnerParams) -> np.ndarray:
    t = np.asarray(t, float)
    return np.where(t + p.delta <= p.T, -_omega_integrand(np.minimum(t + p.delta, p.T), p), 0.0)


def upsilon_omega_identities(p: FrontrunnerParams, grid: TimeGrid | None = None, h: float = 1e-5) -> dict:
    """Central-difference check of the ODEs satisfied by ``Upsilon`` and ``Omega`` left of ``T - Delta``.

    ``omega_defect`` uses ``Om' = Delta Ups / Lam - 1``; ``omega_defect_flipped``
    reports the opposite sign for comparison.
    """
    pts = np.linspace(0, p.T, 1025) if grid is None else grid.points
    t = pts[pts < p.T - p.delta - 2 * h]
    ups = upsilon(t, p)
    dU = (upsilon(t + h, p) - upsilon(t - h, p)) / (2 * h) if t.size else t
    om = np.array([omega(s + h, p) - omega(s - h, p) for s in t]) / (2 * h)
    k = p.delta * ups / p.Lam - 1.0
    return {
        "points": int(t.size),
        "h": h,
        "upsilon_defect": float(np.max(np.abs(dU + k ** 2 - ups ** 2 / p.Lam), initial=0.0)),
        "omega_defect": float(np.max(np.abs(om - k), initial=0.0)),
        "omega_defect_flipped": float(np.max(np.abs(om + k), initial=0.0)),
    }


# ---------------------------------------------------------------- window terms

def _prefix(W: np.ndarray, grid: TimeGrid) -> tuple[np.ndarray, np.ndarray]:
    """Prefix integrals of ``W`` and ``W^2`` for the linear interpolant; ``W`` is ``(P, N+1)``."""
    dt = grid.steps
    w0, w1 = W[:, :-1], W[:, 1:]
    s1 = np.zeros_like(W)
    s2 = np.zeros_like(W)
    np.cumsum(0.5 * dt * (w0 + w1), axis=1, out=s1[:, 1:])
    np.cumsum(dt * (w0 * w0 + w0 * w1 + w1 * w1) / 3.0, axis=1, out=s2[:, 1:])
    return s1, s2


@dataclass
class Window:
    a: np.ndarray      # W(tau(t))
    delta: np.ndarray  # W(tau(t)) - W(t)
    L: np.ndarray      # tau(t) - t
    I1: np.ndarray
    I2: np.ndarray


def window_terms(k, grid: TimeGrid, W: np.ndarray, tc: TimeChange) -> Window:
    """Window data at grid indices ``k`` (``(P,)``) for paths ``W`` (``(P, N+1)`` or ``(P, N+1, 1)``)."""
    W = W[..., 0] if W.ndim == 3 else W
    k = np.asarray(k)
    ti = tau_index(tc, grid)
    if not ti.exact:
        raise InvalidArgument("delta must be a whole number of grid steps")
    j = ti.lo[k]
    rows = np.arange(W.shape[0])
    # Shift by a per-path constant to keep the quadratic form well conditioned.
    a = W[rows, j]
    Wc = W - a[:, None]
    s1, s2 = _prefix(Wc, grid)
    L = grid.points[j] - grid.points[k]
    int1 = s1[rows, j] - s1[rows, k]
    int2 = s2[rows, j] - s2[rows, k]
    return Window(a, a - W[rows, k], L, -int1, int2)


def window_all(grid: TimeGrid, W: np.ndarray, tc: TimeChange) -> Window:
    """Window data at every grid index, each entry ``(P, N+1)``."""
    W = W[..., 0] if W.ndim == 3 else W
    ti = tau_index(tc, grid)
    if not ti.exact:
        raise InvalidArgument("delta must be a whole number of grid steps")
    j = ti.lo
    s1, s2 = _prefix(W, grid)
    a = W[:, j]
    L = grid.points[j] - grid.points
    intW = s1[:, j] - s1
    intW2 = s2[:, j] - s2
    I1 = a * L - intW
    I2 = a * a * L - 2 * a * intW + intW2
    return Window(a, a - W, np.broadcast_to(L, W.shape), I1, I2)


# -------------------------------------------------------------------- candidate

def h_parts(t, Phi, win: Window, p: FrontrunnerParams) -> dict:
    ups = upsilon(t, p)
    C = Phi + win.I1 / p.Lam
    h = Phi * win.a + win.I2 / (2 * p.Lam) - 0.5 * ups * C * C + p.delta * omega(t, p) / (2 * p.Lam)
    return {"h": h, "C": C, "ups": ups}


def candidate(p: FrontrunnerParams, ablate: str | None = None) -> HJBCandidate:
    """``u = -exp(-(x - Phi s + h))`` with analytic derivatives.

    ``ablate="transport"`` drops the ``-Phi s`` term, which breaks the transport
    equation (residual ``-Phi u``).
    """
    tc = p.tc
    keep_s = 0.0 if ablate == "transport" else 1.0

    def value(k, grid, Y, W):
        t = grid.points[np.asarray(k)]
        win = window_terms(k, grid, W, tc)
        hp = h_parts(t, Y[:, 1], win, p)
        return -np.exp(-(Y[:, 0] - keep_s * Y[:, 1] * Y[:, 2] + hp["h"]))

    def bundle(k, grid, Y, W):
        t = grid.points[np.asarray(k)]
        x, Phi, s = Y[:, 0], Y[:, 1], Y[:, 2]
        win = window_terms(k, grid, W, tc)
        hp = h_parts(t, Phi, win, p)
        C, ups = hp["C"], hp["ups"]
        u = -np.exp(-(x - keep_s * Phi * s + hp["h"]))
        h_Phi = win.a - ups * C
        Dh = (-win.delta ** 2 / (2 * p.Lam) - 0.5 * upsilon_prime(t, p) * C * C
              + ups * C * win.delta / p.Lam + p.delta * omega_prime(t, p) / (2 * p.Lam))
        lam_l = 1.0 - ups * win.L / p.Lam
        h_z = C * lam_l
        h_zz = (win.L / p.Lam) * lam_l
        # E = x - Phi s + h; u = -exp(-E): grad u = -u grad E, hess u = u (gE gE^T - HE).
        gE = np.stack([np.ones_like(x), h_Phi - keep_s * s, -keep_s * Phi], axis=1)
        HE = np.zeros((x.size, 3, 3))
        HE[:, 1, 1] = -ups
        HE[:, 1, 2] = HE[:, 2, 1] = -keep_s
        grad_y = -u[:, None] * gE
        hess_y = u[:, None, None] * (np.einsum("pi,pj->pij", gE, gE) - HE)
        hess_z = (u * (h_z ** 2 - h_zz))[:, None, None]
        return CandidateBundle(value=u, D=-u * Dh, grad_y=grad_y, hess_y=hess_y,
                               grad_w=np.zeros((x.size, 1)), hess_w=np.zeros((x.size, 1, 1)),
                               hess_z=hess_z)

    return HJBCandidate(value, bundle, name="frontrunner" + (f"-no-{ablate}" if ablate else ""))


def h_derivatives(k, grid: TimeGrid, Phi, W: np.ndarray, p: FrontrunnerParams) -> dict:
    """Analytic ``Dh``, ``dh/dPhi``, ``grad_z h`` and ``hess_z h`` at probes."""
    t = grid.points[np.asarray(k)]
    win = window_terms(k, grid, W, p.tc)
    hp = h_parts(t, Phi, win, p)
    C, ups = hp["C"], hp["ups"]
    lam_l = 1.0 - ups * win.L / p.Lam
    return {
        "h": hp["h"],
        "D": (-win.delta ** 2 / (2 * p.Lam) - 0.5 * upsilon_prime(t, p) * C * C
              + ups * C * win.delta / p.Lam + p.delta * omega_prime(t, p) / (2 * p.Lam)),
        "dPhi": win.a - ups * C,
        "grad_z": C * lam_l,
        "hess_z": (win.L / p.Lam) * lam_l,
    }


def slot_functional(p: FrontrunnerParams, w: CausalPath) -> CausalFunctional:
    """``h(t, Phi, w, z)`` in the initial-segment / causal-path form.

    ``w`` is the driver on ``[0, Delta]`` (a parameter); slot ``z`` holds
    ``z(r) = W(tau(r)) - W(Delta)``. Its vertical bump moves ``W(tau(t))`` only.
    """
    D = p.delta
    wD = float(w.at(D)[0])

    def value(t, P, par):
        z = P["z"]
        Phi = par["Phi"]
        zt = float(z.current[0])
        a = wD + zt
        lo_w, lo_z = min(t, D), max(t - D, 0.0)
        i1 = w.integrate(lambda v: a - v[:, 0], lo_w, D) + z.integrate(lambda v: zt - v[:, 0], lo_z, t)
        i2 = (w.integrate(lambda v: (a - v[:, 0]) ** 2, lo_w, D)
              + z.integrate(lambda v: (zt - v[:, 0]) ** 2, lo_z, t))
        C = Phi + float(i1) / p.Lam
        return float(Phi * a + float(i2) / (2 * p.Lam) - 0.5 * float(upsilon(t, p)) * C * C
                     + D * float(omega(t, p)) / (2 * p.Lam))

    return CausalFunctional(value=value, slots=("z",), params={"Phi": 0.0, "T": p.T},
                            name="frontrunner-h")


def value_t0(p: FrontrunnerParams, w_times: np.ndarray | None = None, w_values: np.ndarray | None = None) -> float:
    """Closed-form value at ``t = 0``, ``x = 0``, ``Phi = Phi0`` given ``w`` on ``[0, Delta]``.

    Window integrals are exact for the piecewise-linear interpolant of ``w``.
    """
    if w_values is None:
        w_times, w_values = np.array([0.0, p.delta]), np.zeros(2)
    w_times = np.asarray(w_times, float)
    w_values = np.asarray(w_values, float).ravel()
    wD = w_values[-1]
    i1 = integrate.trapezoid(wD - w_values, w_times)
    d0, d1 = wD - w_values[:-1], wD - w_values[1:]
    i2 = float(np.sum(np.diff(w_times) * (d0 * d0 + d0 * d1 + d1 * d1) / 3.0))
    C = p.Phi0 + i1 / p.Lam
    v = (p.T - p.delta) / np.sqrt(p.Lam)
    denom = p.delta / p.Lam + 1.0 / (np.sqrt(p.Lam) * np.tanh(v))
    expo = (-p.Phi0 * (wD - w_values[0]) - i2 / (2 * p.Lam) + 0.5 * C * C / denom
            - p.delta / (2 * p.Lam) * float(omega(0.0, p)))
    return float(-np.exp(expo))


# ----------------------------------------------------------------- optimal speed

def optimal_speed(t: float, Phi: float, times: np.ndarray, W: np.ndarray, p: FrontrunnerParams) -> float:
    """``phi*(t)`` from ``W`` sampled on the window ``[t, (t + Delta) ^ T]`` (trapezoid)."""
    times = np.asarray(times, float)
    W = np.asarray(W, float).ravel()
    end = min(t + p.delta, p.T)
    if times[0] > t + 1e-12 or times[-1] < end - 1e-12:
        raise InvalidArgument("window must cover [t, (t + Delta) ^ T]")
    sel = (times >= t - 1e-12) & (times <= end + 1e-12)
    tw, ww = times[sel], W[sel]
    a = ww[-1]
    C = Phi + integrate.trapezoid(a - ww, tw) / p.Lam
    return float((a - ww[0] - float(upsilon(t, p)) * C) / p.Lam)


def optimal_feedback(p: FrontrunnerParams) -> FeedbackControl:
    """Vectorised ``phi*`` reading ``W`` on ``[t, tau(t)]``; window integrals exact as in the candidate."""

    def prepare(W, grid, tc):
        win = window_all(grid, W, tc)
        # Time-major copies: the rule reads one column per step.
        return {"delta": np.ascontiguousarray(win.delta.T), "I1": np.ascontiguousarray(win.I1.T),
                "ups": upsilon(grid.points, p)}

    def rule(k, t, y, ctx):
        C = y[:, 1] + ctx["I1"][k] / p.Lam
        return ((ctx["delta"][k] - ctx["ups"][k] * C) / p.Lam)[:, None]

    return FeedbackControl(rule, prepare, name="phi*")


# ----------------------------------------------------------------------- probes

def probes(p: FrontrunnerParams, grid: TimeGrid, count: int = 200, seed: int = 0) -> ProbeSet:
    """Random ``(t, x, Phi, s = W(t))`` with Brownian ``W``; ``t`` avoids ``T - Delta`` and ``T``."""
    rng = np.random.default_rng(seed)
    W = brownian_batch(grid, 1, seed, range(count))
    kink = grid.index(p.T - p.delta)
    ks = np.setdiff1d(np.arange(grid.N), [kink])
    k = rng.choice(ks, size=count)
    x = rng.standard_normal(count)
    Phi = rng.standard_normal(count)
    rows = np.arange(count)
    y = np.stack([x, Phi, W[rows, k, 0]], axis=1)
    yT = np.stack([x, Phi, W[rows, -1, 0]], axis=1)
    return ProbeSet(grid, W, k, y, yT, seed)
