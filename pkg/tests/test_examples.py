import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate

from roughhjb.causal import CausalPath
from roughhjb.errors import InvalidArgument
from roughhjb.examples import frontrunner as fr
from roughhjb.examples import insider as ins
from roughhjb.examples import pathwise as pw
from roughhjb.grid_paths import brownian_batch, make_uniform_grid
from roughhjb.hjb import hjb_residuals
from roughhjb.timechange import grid_for_lookahead, split_initial_segment, time_changed_values

P = fr.FrontrunnerParams()
GRID = grid_for_lookahead(1.0, 0.1, 200)


def interp_quad(fn, a, b, times, W):
    pts = times[(times > a) & (times < b)]
    return integrate.quad(lambda r: fn(np.interp(r, times, W)), a, b, points=pts, limit=500,
                          epsabs=1e-13, epsrel=1e-12)[0]


class TestUpsilonOmega:
    def test_identities(self):
        ids = fr.upsilon_omega_identities(P)
        assert ids["upsilon_defect"] < 1e-5 and ids["omega_defect"] < 1e-5
        assert ids["omega_defect_flipped"] > 1.0

    @given(st.floats(0.2, 3.0), st.floats(0.02, 0.5))
    def test_closed_omega(self, Lam, delta):
        p = fr.FrontrunnerParams(Lam=Lam, delta=delta)
        if abs(delta / np.sqrt(Lam) - 1) < 1e-3:
            return
        t = np.linspace(0, 1, 7)
        assert np.allclose(fr.omega(t, p), fr.omega_closed(t, p), atol=1e-10)

    def test_zero_past_kink(self):
        t = np.linspace(0.9, 1.0, 5)
        assert np.all(fr.upsilon(t, P) == 0) and np.all(fr.omega(t, P) == 0)
        assert np.all(fr.upsilon_prime(t[1:], P) == 0) and np.all(fr.omega_prime(t[1:], P) == 0)

    def test_upsilon_prime(self):
        t, h = np.linspace(0.0, 0.85, 11), 1e-6
        fd = (fr.upsilon(t + h, P) - fr.upsilon(t - h, P)) / (2 * h)
        assert np.allclose(fr.upsilon_prime(t, P), fd, atol=1e-7)

    def test_params(self):
        with pytest.raises(InvalidArgument):
            fr.FrontrunnerParams(delta=1.5)
        with pytest.raises(InvalidArgument):
            fr.omega_closed(0.0, fr.FrontrunnerParams(Lam=0.01, delta=0.1))


class TestWindows:
    def test_exact_integrals(self):
        W = brownian_batch(GRID, 1, 3, [0])[:, :, 0]
        t = GRID.points
        for k in (0, 37, 150, 190):
            win = fr.window_terms(np.array([k]), GRID, W, P.tc)
            j = GRID.index(min(t[k] + 0.1, 1.0))
            a = W[0, j]
            assert win.I1[0] == pytest.approx(interp_quad(lambda v: a - v, t[k], t[j], t, W[0]), abs=1e-12)
            assert win.I2[0] == pytest.approx(interp_quad(lambda v: (a - v) ** 2, t[k], t[j], t, W[0]),
                                              abs=1e-12)

    def test_all_matches_single(self):
        W = brownian_batch(GRID, 1, 5, range(3))
        allw = fr.window_all(GRID, W, P.tc)
        k = np.array([4, 100, 195])
        one = fr.window_terms(k, GRID, W, P.tc)
        rows = np.arange(3)
        assert np.allclose(allw.I1[rows, k], one.I1, atol=1e-12)
        assert np.allclose(allw.I2[rows, k], one.I2, atol=1e-12)
        assert np.array_equal(allw.delta[rows, k], one.delta)

    def test_misaligned_grid(self):
        g = make_uniform_grid(1.0, 64)
        with pytest.raises(InvalidArgument):
            fr.window_terms(np.array([0]), g, np.zeros((1, 65)), P.tc)


class TestFrontrunnerCandidate:
    def test_residuals(self):
        pr = fr.probes(P, GRID, 100, seed=1)
        rep = hjb_residuals(fr.candidate(P), fr.problem(P), pr)
        s = rep.summary()
        assert s["parabolic"]["max"] < 1e-6 and s["transport"]["max"] < 1e-6
        assert s["terminal"]["max"] <= 1e-12

    def test_ablations_fail(self):
        pr = fr.probes(P, GRID, 50, seed=2)
        rep = hjb_residuals(fr.candidate(P, ablate="transport"), fr.problem(P), pr)
        u = fr.candidate(P, ablate="transport").value(pr.k, GRID, pr.y, pr.W)
        assert np.allclose(rep.transport[:, 0], -pr.y[:, 1] * u, atol=1e-10)
        rep = hjb_residuals(fr.candidate(P), fr.problem(P), pr, drop=("z-trace",))
        assert rep.summary()["parabolic"]["max"] > 1e-3

    def test_slot_form(self):
        W = brownian_batch(GRID, 1, 7, [0])
        w, Z = split_initial_segment(_sample(W[0]), P.tc)
        F = fr.slot_functional(P, CausalPath(w.times, w.values))
        for k in (10, 80, 150, 195):
            t = GRID.points[k]
            Zt = CausalPath.from_sample(Z, t)
            got = F(t, {"z": Zt}, {"Phi": 0.7})
            want = fr.h_parts(t, 0.7, fr.window_terms(np.array([k]), GRID, W, P.tc), P)["h"][0]
            assert got == pytest.approx(want, abs=1e-10)

    def test_value_t0(self):
        p = fr.FrontrunnerParams(Phi0=0.8)
        W = brownian_batch(GRID, 1, 9, [0])
        j = GRID.index(0.1)
        v = fr.value_t0(p, GRID.points[:j + 1], W[0, :j + 1, 0])
        u = fr.candidate(p).value(np.array([0]), GRID, np.array([[0.0, 0.8, 0.0]]), W)[0]
        assert v == pytest.approx(u, rel=1e-12)
        assert fr.value_t0(fr.FrontrunnerParams()) < 0

    def test_feedback(self):
        W = brownian_batch(GRID, 1, 11, range(2))
        ctl = fr.optimal_feedback(P)
        y = np.array([[0.0, 0.3, 0.0], [0.0, -1.0, 0.0]])
        rule = ctl.bind(W, GRID, P.tc)
        for k in (0, 50, 190):
            t = GRID.points[k]
            got = rule(k, t, y)[:, 0]
            want = [fr.optimal_speed(t, y[r, 1], GRID.points, W[r, :, 0], P) for r in range(2)]
            assert np.allclose(got, want, atol=1e-12)
        assert ctl.audit(W, GRID, P.tc, y)

    def test_feedback_matches_hamiltonian(self):
        pr = fr.probes(P, GRID, 30, seed=4)
        rep = hjb_residuals(fr.candidate(P), fr.problem(P), pr)
        rule = fr.optimal_feedback(P).bind(pr.W, GRID, P.tc)
        got = np.array([rule(k, 0.0, pr.y)[r, 0] for r, k in enumerate(pr.k)])
        assert np.allclose(got, rep.phi_star[:, 0], atol=1e-8)


def _sample(W):
    from roughhjb.grid_paths import SamplePath
    return SamplePath(GRID, W)


class TestPathwise:
    G = make_uniform_grid(1.0, 512)

    def test_formula_zero_control(self):
        W = brownian_batch(self.G, 1, 0, [0])[0, :, 0]
        X = pw.solution_formula(0.25, 0.5, 0.0, W, self.G)
        k = self.G.index(0.25)
        assert np.allclose(X[k:], 0.5 * np.exp(W[k:] - W[k]), rtol=1e-13)
        assert np.all(X[:k] == 0.5)

    def test_reachable_hits_target(self):
        W = brownian_batch(self.G, 1, 0, range(40))[:, :, 0]
        hit = 0
        for w in W:
            vc = pw.value_and_control(0.0, 0.5, w, self.G)
            if vc["branch"] == "reachable" and not vc["clipped"]:
                X = pw.solution_formula(0.0, 0.5, vc["phi"], w, self.G)
                assert X[-1] == pytest.approx(1.0, abs=1e-12)
                hit += 1
            elif vc["branch"] == "short":
                assert vc["value"] == pytest.approx(1.0 - vc["A"] - vc["I"])
        assert hit > 0

    def test_candidate_residuals(self):
        pr = pw.probes(self.G, 50, seed=3)
        s = hjb_residuals(pw.candidate(), pw.problem(), pr, mode="state").summary()
        assert s["parabolic"]["max"] < 1e-8 and s["transport"]["max"] < 1e-12
        assert s["terminal"]["max"] < 1e-12

    def test_defective(self):
        pr = pw.probes(self.G, 20, seed=3, short_branch=False)
        rep = hjb_residuals(pw.defective_candidate(1.0), pw.problem(), pr, mode="state")
        assert np.all(rep.parabolic == 0)
        assert np.allclose(rep.transport[:, 0], -pr.y[:, 0])

    def test_solver_vs_formula(self):
        W = brownian_batch(self.G, 1, 5, range(3))
        Y = pw.stratonovich_solve(0.5, 0.3, W, self.G)
        for r in range(3):
            X = pw.solution_formula(0.0, 0.5, 0.3, W[r, :, 0], self.G)
            assert abs(Y[r, -1, 0] - X[-1]) < 2e-2

    def test_checks_small(self):
        assert pw.reachable_check(N=1024, paths=3)["max_err_formula"] < 1e-3
        assert pw.short_branch_check(N=1024, paths=3)["max_gap"] < 2e-2


class TestInsider:
    G = make_uniform_grid(1.0, 256)
    p = ins.InsiderParams()

    def test_correct_coefficient(self):
        rep = ins.residual_check(self.p, self.G, 40)
        assert rep["parabolic_max"] < 1e-8 and rep["transport_max"] == 0 and rep["terminal_max"] == 0
        assert np.allclose(rep["phi_star"], rep["phi_expected"], atol=1e-10)

    def test_printed_coefficient(self):
        rep = ins.residual_check(self.p, self.G, 40, factor=ins.PRINTED_FACTOR)
        assert np.allclose(rep["parabolic"], rep["predicted"], atol=1e-10)
        assert rep["parabolic_max"] > 1e-3

    def test_numeric_optimum(self):
        g = make_uniform_grid(1.0, 64)
        W = brownian_batch(g, 1, 0, [0])[0, :, 0]
        opt = ins.pathwise_optimum(0.0, 0.3, 0.5, W, g, self.p)["value"]
        right = ins.value(0.0, 0.3, 0.5, W, g, self.p)
        wrong = ins.value(0.0, 0.3, 0.5, W, g, self.p, factor=ins.PRINTED_FACTOR)
        assert abs(opt - right) < 0.05 * abs(right)
        assert abs(opt - wrong) > 5 * abs(opt - right)

    def test_value_and_check(self):
        W = brownian_batch(self.G, 1, 1, [0])[0, :, 0]
        v, rep = ins.insider_value_and_check(0.0, 0.0, 0.0, W, self.G, self.p, 10)
        assert v > 0 and rep["printed"]["parabolic_max"] > rep["corrected"]["parabolic_max"]

    def test_params(self):
        with pytest.raises(InvalidArgument):
            ins.InsiderParams(eps=0.0)
