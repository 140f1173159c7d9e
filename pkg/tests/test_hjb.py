import numpy as np
import pytest
from hypothesis import given, strategies as st

from roughhjb.errors import InvalidArgument, UnboundedHamiltonian, UnsupportedConfiguration, UnsupportedFunctional
from roughhjb.grid_paths import brownian_batch, make_uniform_grid
from roughhjb.hjb import (CandidateBundle, ControlProblem, ControlSet, FeedbackControl, HJBCandidate, MCResult,
                          ProbeSet, box, constant_control, dominance_check, extend_paths, finite,
                          hamiltonian_batch, hamiltonian_sup, hjb_residuals, martingale_drift_test, mc_value,
                          simulate)
from roughhjb.rde import Coefficients, additive_coefficients, control_drift_coefficients
from roughhjb.timechange import identity, lookahead, tau_index

GRID = make_uniform_grid(1.0, 64)
TC = lookahead(0.25)


def concave_b(t, y, phi):
    return phi - 0.5 * phi ** 2


class TestHamiltonian:
    def test_concave(self):
        v, phi = hamiltonian_sup([1.0], concave_b, 0.0, [0.0])
        assert v == pytest.approx(0.5) and phi[0] == pytest.approx(1.0)

    def test_sense_flip(self):
        v, phi = hamiltonian_sup([-1.0], concave_b, 0.0, [0.0], sense="minimize")
        assert v == pytest.approx(-0.5) and phi[0] == pytest.approx(1.0)

    @given(st.floats(-5, -0.1), st.floats(-5, 5))
    def test_quadratic_closed_form(self, a, c):
        b = lambda t, y, phi: 0.5 * a * phi ** 2 + c * phi
        v, phi = hamiltonian_sup([1.0], b, 0.0, [0.0])
        assert v == pytest.approx(-c ** 2 / (2 * a), rel=1e-9, abs=1e-12)
        assert phi[0] == pytest.approx(-c / a, rel=1e-9, abs=1e-12)

    def test_two_dim(self):
        b = lambda t, y, phi: -np.sum((phi - [1.0, -2.0]) ** 2, axis=1, keepdims=True)
        v, phi = hamiltonian_sup([1.0], b, 0.0, [0.0], m=2)
        assert v == pytest.approx(0.0, abs=1e-12) and np.allclose(phi, [1, -2])

    @pytest.mark.parametrize("b", [lambda t, y, p: p, lambda t, y, p: p ** 2])
    def test_unbounded(self, b):
        with pytest.raises(UnboundedHamiltonian):
            hamiltonian_sup([1.0], b, 0.0, [0.0])

    def test_not_quadratic(self):
        with pytest.raises(UnsupportedConfiguration):
            hamiltonian_sup([1.0], lambda t, y, p: np.sin(p), 0.0, [0.0])

    def test_box_and_finite(self):
        v, phi = hamiltonian_sup([1.0], lambda t, y, p: p, 0.0, [0.0], control_set=box(-1, 2))
        assert v == pytest.approx(2.0) and phi[0] == pytest.approx(2.0)
        v, phi = hamiltonian_sup([1.0], lambda t, y, p: np.sin(p), 0.0, [0.0], control_set=box(0, 3))
        assert v == pytest.approx(1.0, abs=1e-9) and phi[0] == pytest.approx(np.pi / 2, abs=1e-4)
        v, phi = hamiltonian_sup([-1.0], lambda t, y, p: p, 0.0, [0.0], control_set=finite([-2, 0.5, 3]))
        assert v == 2.0 and phi[0] == -2.0

    def test_batch_independent_of_order(self):
        g = np.array([[1.0], [2.0], [0.5]])
        y = np.zeros((3, 1))
        v, _ = hamiltonian_batch(g, concave_b, np.zeros(3), y, 1)
        v2, _ = hamiltonian_batch(g[::-1], concave_b, np.zeros(3), y, 1)
        assert np.array_equal(v, v2[::-1])

    def test_control_set_errors(self):
        with pytest.raises(InvalidArgument):
            ControlSet("box", (1.0,), (0.0,))
        with pytest.raises(InvalidArgument):
            ControlSet("finite", values=())
        with pytest.raises(InvalidArgument):
            ControlSet("ball")


def additive_problem(g=lambda Y: Y[:, 0], tc=TC, convention="ito"):
    return ControlProblem(additive_coefficients(1), g, tc, convention=convention)


def probes(P=8, seed=0):
    W = brownian_batch(GRID, 1, seed, range(P))
    rng = np.random.default_rng(seed)
    return ProbeSet(GRID, W, rng.integers(0, GRID.N, P), rng.standard_normal((P, 1)), seed=seed)


def state_candidate(power=1, grad_w=None):
    def value(k, g, Y, W):
        return Y[:, 0] ** power

    def bundle(k, g, Y, W):
        P = Y.shape[0]
        gy = power * Y ** (power - 1)
        hy = (power * (power - 1) * Y ** max(power - 2, 0))[:, :, None]
        gw = None if grad_w is None else np.full((P, 1), grad_w)
        return CandidateBundle(value(k, g, Y, W), np.zeros(P), gy, hy, grad_w=gw)
    return HJBCandidate(value, bundle, name=f"y^{power}")


class TestResiduals:
    def test_linear_candidate(self):
        rep = hjb_residuals(state_candidate(1), additive_problem(), probes())
        assert np.all(rep.parabolic == 0) and np.all(rep.terminal == 0)
        assert np.all(rep.transport == 1.0)
        assert not rep.passed(1e-8)

    def test_transport_with_current_noise(self):
        cand = state_candidate(1, grad_w=-1.0)
        assert np.all(hjb_residuals(cand, additive_problem(), probes()).transport == 0)
        assert np.all(hjb_residuals(cand, additive_problem(), probes(), mode="state").transport == 1)

    def test_square_conventions(self):
        p = probes()
        assert np.allclose(hjb_residuals(state_candidate(2), additive_problem(), p).parabolic, 1.0)
        strat = additive_problem(convention="stratonovich")
        assert np.all(hjb_residuals(state_candidate(2), strat, p).parabolic == 0)
        dropped = hjb_residuals(state_candidate(2), additive_problem(), p, drop=("second-order",))
        assert np.all(dropped.parabolic == 0) and dropped.summary()["dropped"] == ["second-order"]

    def test_terminal_probes(self):
        p = probes()
        p.y_terminal = np.full((8, 1), 3.0)
        rep = hjb_residuals(state_candidate(1).shifted(0.5), additive_problem(), p)
        assert np.all(rep.terminal == 0.5)

    def test_errors(self):
        with pytest.raises(UnsupportedFunctional):
            hjb_residuals(HJBCandidate(lambda k, g, Y, W: Y[:, 0]), additive_problem(), probes())
        with pytest.raises(InvalidArgument):
            hjb_residuals(state_candidate(1), additive_problem(), probes(), mode="weird")
        with pytest.raises(InvalidArgument):
            ControlProblem(additive_coefficients(1), lambda Y: Y[:, 0], TC, sense="up")


class TestMonteCarlo:
    def info(self, t, seed=0):
        j = int(tau_index(TC, GRID).hi[GRID.index(t)])
        return brownian_batch(GRID, 1, seed, [0])[0, :j + 1]

    def test_constant_reward(self):
        pr = additive_problem(g=lambda Y: np.full(Y.shape[0], 2.0))
        res = mc_value(pr, None, 0.25, [0.0], self.info(0.25), 200, GRID, 1)
        assert res.mean == 2.0 and res.stderr == 0.0 and res.samples == 200

    def test_frozen_state(self):
        pr = ControlProblem(control_drift_coefficients(1), lambda Y: Y[:, 0], TC)
        res = mc_value(pr, constant_control(0.0), 0.5, [1.5], self.info(0.5), 100, GRID, 1)
        assert res.mean == 1.5 and res.stderr == 0.0

    def test_conditional_mean(self):
        info = self.info(0.25)
        res = mc_value(additive_problem(), None, 0.25, [0.0], info, 4000, GRID, 2)
        want = info[-1, 0] - info[GRID.index(0.25), 0]
        assert abs(res.mean - want) < 4 * res.stderr

    def test_thread_and_chunk_invariance(self):
        info = self.info(0.25)
        pr = additive_problem(g=lambda Y: Y[:, 0] ** 2)
        a = mc_value(pr, None, 0.25, [0.0], info, 900, GRID, 3, chunk=1000, threads=1)
        b = mc_value(pr, None, 0.25, [0.0], info, 900, GRID, 3, chunk=100, threads=3)
        assert a.mean == b.mean and a.stderr == b.stderr
        assert np.array_equal(np.sort(a.values), np.sort(b.values))

    def test_info_shape(self):
        with pytest.raises(InvalidArgument):
            mc_value(additive_problem(), None, 0.25, [0.0], self.info(0.5), 10, GRID, 0)

    def test_extend_paths(self):
        info = self.info(0.25)
        P = extend_paths(info, GRID, (7,), [0, 1, 2])
        Q = extend_paths(info, GRID, (7,), [2])
        assert np.array_equal(P[:, :info.shape[0]], np.broadcast_to(info, (3,) + info.shape))
        assert np.array_equal(P[2], Q[0]) and not np.array_equal(P[0], P[1])

    def test_simulate_additive(self):
        W = brownian_batch(GRID, 1, 4, range(3))
        sol = simulate(additive_problem(), None, W, GRID, 0, [0.0])
        assert np.allclose(sol.Y[:, :, 0], W[:, :, 0], atol=1e-13)


class TestDrift:
    def info(self):
        return brownian_batch(GRID, 1, 0, [0])[0, :1]

    def test_constant_candidate_zero(self):
        cand = HJBCandidate(lambda k, g, Y, W: np.full(Y.shape[0], 3.0))
        pr = additive_problem(tc=identity())
        rep = martingale_drift_test(cand, pr, None, 0.0, [0.0], self.info(), [0, 0.5, 1], GRID, 1,
                                    outer=8, inner=8)
        assert np.all(rep.drift == 0) and rep.within()

    def test_martingale_and_supermartingale(self):
        pr = additive_problem(tc=identity())
        cand = state_candidate(1)
        rep = martingale_drift_test(cand, pr, None, 0.0, [0.0], self.info(), [0, 0.5, 1], GRID, 2,
                                    outer=32, inner=16)
        assert rep.within()
        neg = ControlProblem(additive_coefficients(1, drift=[-1.0]), lambda Y: Y[:, 0], identity())
        rep = martingale_drift_test(cand, neg, None, 0.0, [0.0], self.info(), [0, 0.5, 1], GRID, 2,
                                    outer=32, inner=16)
        assert rep.supermartingale() and rep.strictly_negative()
        assert np.all(np.abs(rep.drift + 0.5) < 4 * rep.stderr)

    def test_thread_invariance(self):
        pr = additive_problem(tc=identity())
        args = (state_candidate(2), pr, None, 0.0, [0.0], self.info(), [0, 0.25, 1], GRID, 5)
        a = martingale_drift_test(*args, outer=16, inner=8, threads=1)
        b = martingale_drift_test(*args, outer=16, inner=8, threads=4, outer_chunk=3)
        assert np.array_equal(a.drift, b.drift) and np.array_equal(a.stderr, b.stderr)

    def test_bad_checkpoints(self):
        with pytest.raises(InvalidArgument):
            martingale_drift_test(state_candidate(1), additive_problem(tc=identity()), None, 0.0, [0.0],
                                  self.info(), [0.5, 0.25], GRID, 0)


class TestDominance:
    def test_slack(self):
        rep = dominance_check(1.0, {"a": (0.5, 0.1), "b": (2.0, 0.1), "c": MCResult(1.2, 0.1, 10, 0)})
        assert rep.entries["a"]["dominated"] and not rep.entries["b"]["dominated"]
        assert rep.entries["c"]["dominated"] and not rep.all_dominated
        assert rep.entries["b"]["slack"] == pytest.approx(-1.0)

    def test_minimize_mirrored(self):
        rep = dominance_check(1.0, {"b": (2.0, 0.1)}, sense="minimize")
        assert rep.all_dominated and rep.entries["b"]["slack"] == pytest.approx(1.0)


class TestFeedback:
    def test_audit(self):
        W = brownian_batch(GRID, 1, 0, range(4))
        idx = tau_index(TC, GRID)
        ok = FeedbackControl(lambda k, t, y, W: W[:, int(idx.hi[k])])
        bad = FeedbackControl(lambda k, t, y, W: W[:, -1])
        y = np.zeros((4, 1))
        assert ok.audit(W, GRID, TC, y)
        assert not bad.audit(W, GRID, TC, y)

    def test_constant(self):
        c = constant_control([0.5, -1.0], m=2)
        assert c.name == "const(0.5, -1)"
        out = c.bind(None, GRID, TC)(0, 0.0, np.zeros((3, 1)))
        assert out.shape == (3, 2)
