import numpy as np
import pytest
from hypothesis import given, strategies as st

from roughhjb.causal import (CausalFunctional, CausalPath, causality_audit, current_value_functional,
                             derivative_bundle, horizontal_derivative, mixed_vertical_derivative,
                             point_functional, reconstruction_functional, running_integral,
                             terminal_value_functional, vertical_derivative, windowed_integral)
from roughhjb.errors import InvalidArgument, OutOfDomain, UnsupportedConfiguration, UnsupportedFunctional
from roughhjb.grid_paths import make_uniform_grid, sample_brownian
from roughhjb.quadvar import fine_grid_for
from roughhjb.timechange import TimeChange, full_knowledge, identity, lookahead, split_initial_segment

TC = lookahead(0.1)


def square_point():
    return point_functional(lambda x: float(np.sum(x ** 2)), lambda x: 2 * x, lambda x: 2 * np.eye(x.size))


def cos_window(tc=TC):
    return windowed_integral(lambda v: np.cos(v).sum(-1), lambda v: -np.sin(v),
                             lambda v: np.stack([np.diag(-np.cos(r)) for r in v]), tc)


def builtins():
    return {"point": square_point(), "running": running_integral(lambda v: np.sum(v ** 2, axis=-1)),
            "current": current_value_functional(), "windowed": cos_window()}


def rel(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def brownian_causal(seed, d=2, N=256):
    return CausalPath.from_sample(sample_brownian(make_uniform_grid(1.0, N), d, seed))


class TestCausalPath:
    def test_interpolation_and_jump(self):
        X = CausalPath([0.0, 1.0], [[0.0], [2.0]])
        assert X.at(0.25)[0] == 0.5
        Y = X.stopped(0.5).bumped([1.0])
        assert Y.at(0.25)[0] == 0.5 and Y.at(0.5)[0] == 2.0 and Y.at(0.9)[0] == 2.0
        assert Y.has_jump and not X.has_jump

    def test_bad_knots(self):
        with pytest.raises(InvalidArgument):
            CausalPath([0.0, 0.0], [0.0, 1.0])

    def test_integrate_linear(self):
        X = CausalPath([0.0, 1.0], [[0.0], [1.0]])
        assert X.integrate(lambda v: v[:, 0] ** 2, 0.0, 1.0) == pytest.approx(1 / 3, abs=1e-15)

    def test_integrate_ignores_jump_before_end(self):
        X = CausalPath([0.0, 0.5], [[1.0], [1.0]], jump=[5.0])
        assert X.integrate(lambda v: v[:, 0], 0.0, 0.5) == pytest.approx(0.5)
        assert X.integrate(lambda v: v[:, 0], 0.0, 1.0) == pytest.approx(0.5 + 6 * 0.5)


class TestVertical:
    def test_square_at_three(self):
        X = CausalPath([0.0, 0.5], [[1.0], [3.0]])
        g, H = vertical_derivative(square_point(), 0.5, X)
        assert abs(g[0] - 6) < 1e-6 and abs(H[0, 0] - 2) < 1e-6

    def test_constant(self):
        F = CausalFunctional(value=lambda t, P, p: 7.0)
        g, H = vertical_derivative(F, 0.3, brownian_causal(0))
        assert np.all(g == 0) and np.all(H == 0)

    def test_running_integral_zero(self):
        g, H = vertical_derivative(running_integral(lambda v: np.sum(v ** 2, axis=-1)), 0.4, brownian_causal(1))
        assert np.allclose(g, 0, atol=1e-10) and np.allclose(H, 0, atol=1e-8)

    def test_rejects_bumps(self):
        F = CausalFunctional(value=lambda t, P, p: 0.0, accepts_bumps=False)
        with pytest.raises(UnsupportedFunctional):
            vertical_derivative(F, 0.3, brownian_causal(0))

    def test_bad_step(self):
        with pytest.raises(InvalidArgument):
            vertical_derivative(square_point(), 0.3, brownian_causal(0), h=-1.0)

    @given(st.integers(0, 10 ** 6), st.floats(0.05, 0.95))
    def test_hessian_symmetric(self, seed, t):
        X = brownian_causal(seed, d=3, N=64)
        for F in builtins().values():
            _, H = vertical_derivative(F, t, X)
            assert np.max(np.abs(H - H.T)) < 1e-8

    def test_mixed(self):
        F = CausalFunctional(value=lambda t, P, p: float(P["y"].at(t)[0] * P["z"].at(t)[1]), slots=("y", "z"))
        P = {"y": brownian_causal(0), "z": brownian_causal(1)}
        M = mixed_vertical_derivative(F, 0.5, P, "y", "z")
        assert np.allclose(M, [[0, 1], [0, 0]], atol=1e-8)


class TestHorizontal:
    def test_running_integral(self):
        X = CausalPath([0.0, 0.5], [[0.0], [2.0]])
        est = horizontal_derivative(running_integral(lambda v: v[:, 0] ** 2), 0.5, X, T=1.0)
        assert abs(est.value - 4) < 1e-4 and not est.unstable

    def test_point_zero(self):
        est = horizontal_derivative(square_point(), 0.3, brownian_causal(2), T=1.0)
        assert est.value == 0.0 and not est.unstable

    def test_errors(self):
        X = brownian_causal(0)
        with pytest.raises(OutOfDomain):
            horizontal_derivative(square_point(), 1.0, X)
        with pytest.raises(InvalidArgument):
            horizontal_derivative(square_point(), 0.5, X, h=0.0)
        with pytest.raises(InvalidArgument):
            horizontal_derivative(square_point(), 0.99, X, h=0.1)

    def test_reconstruction_unstable(self):
        grid = fine_grid_for(1.0, 14, TC)
        rng = np.random.default_rng(1)
        flags = 0
        for k in range(20):
            W = sample_brownian(grid, 1, k)
            w, Z = split_initial_segment(W, TC)
            F = reconstruction_functional(TC, w)
            t = float(rng.uniform(0.2, 0.9))
            X = CausalPath.from_sample(Z)
            assert F(t, X) == pytest.approx(W.at(t + 0.1)[0] - W.at(t)[0], abs=1e-12)
            flags += horizontal_derivative(F, t, X, h=2 ** -7).unstable
        assert flags >= 18

    def test_reconstruction_before_tau0(self):
        grid = fine_grid_for(1.0, 8, TC)
        W = sample_brownian(grid, 1, 3)
        w, Z = split_initial_segment(W, TC)
        F = reconstruction_functional(TC, w)
        X = CausalPath.from_sample(Z)
        t = float(grid.points[5])
        assert F(t, X) == pytest.approx(W.at(t + 0.1)[0] - W.at(t)[0], abs=1e-12)


class TestWindowed:
    def test_constant_f(self):
        c = 2.5
        F = windowed_integral(lambda v: np.full(v.shape[0], c), lambda v: np.zeros_like(v),
                              lambda v: np.zeros(v.shape + (v.shape[-1],)), TC)
        X = brownian_causal(0, d=1)
        for t in (0.05, 0.3, 0.8):
            lo = float(TC.inverse(t))
            assert F(t, X) == pytest.approx(c * float(TC.tau(t) - TC.tau(lo)), abs=1e-12)
            want = c * float(TC.dtau(t)) - c * float(TC.dtau(lo)) * float(TC.dinverse(t))
            assert derivative_bundle(F, t, X).DF == pytest.approx(want, abs=1e-12)

    def test_flat_tau_rejected(self):
        flat = TimeChange("table", 1.0, knots=((0.0, 0.2), (0.3, 0.5), (0.5, 0.5), (1.0, 1.0)))
        with pytest.raises(UnsupportedConfiguration):
            cos_window(flat)

    def test_full_knowledge_window_is_whole_past(self):
        F = cos_window(full_knowledge())
        assert F(0.5, brownian_causal(0)) == 0.0

    def test_identity_window_empty(self):
        F = cos_window(identity())
        assert F(0.5, brownian_causal(0)) == 0.0


class TestAgreement:
    @pytest.mark.parametrize("name", ["point", "running", "current", "windowed"])
    def test_numeric_vs_analytic(self, name):
        F = builtins()[name]
        rng = np.random.default_rng(5)
        for k in range(20):
            X = brownian_causal(k)
            t = float(rng.uniform(0.01, 0.99))
            a, n = derivative_bundle(F, t, X), derivative_bundle(F, t, X, numeric=True)
            assert rel(n.DF, a.DF) < 1e-5
            assert rel(n.grad["x"], a.grad["x"]) < 1e-5
            assert rel(n.hess["x"], a.hess["x"]) < 1e-5
            assert a.grad["x"].shape == (2,) and a.hess["x"].shape == (2, 2)


class TestAudit:
    @pytest.mark.parametrize("name", ["point", "running", "current", "windowed"])
    def test_builtins_pass(self, name):
        F = builtins()[name]
        X = brownian_causal(3)
        assert causality_audit(F, 0.4, X)
        for fn in [F.D, F.grad["x"], F.hess["x"]]:
            assert causality_audit(fn, 0.4, X)

    def test_terminal_value_fails(self):
        assert not causality_audit(terminal_value_functional(), 0.4, brownian_causal(3))

    def test_knot_inserted(self):
        # t between knots: perturbation must not move the value at t itself.
        X = CausalPath([0.0, 1.0], [[0.0], [1.0]])
        assert causality_audit(current_value_functional(), 0.37, X)
