import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.special import zeta

from roughhjb.controlled import (ControlledPath, compose_smooth, germ_defect, identity_controlled, integral_path,
                                 remainder, rough_integral, sewing_constant)
from roughhjb.errors import InvalidArgument
from roughhjb.grid_paths import make_uniform_grid
from roughhjb.roughpath import brownian_rough_path


def rp_1d(N=256, seed=0, oversample=8):
    return brownian_rough_path(make_uniform_grid(1.0, N), 1, seed, oversample)


def const_path(rp, c):
    N = rp.grid.N
    return ControlledPath(np.full((N + 1, rp.d), c), np.zeros((N + 1, rp.d, rp.d)), rp)


class TestRemainder:
    def test_identity_controlled_is_exact(self):
        rp = brownian_rough_path(make_uniform_grid(1.0, 32), 2, 1)
        cp = identity_controlled(rp)
        assert np.all(remainder(cp, 0.25, 0.75) == 0)

    def test_constant(self):
        rp = rp_1d(16)
        assert np.all(remainder(const_path(rp, 3.0), 0.0, 1.0) == 0)

    def test_drift_path(self):
        rp = brownian_rough_path(make_uniform_grid(1.0, 16), 2, 0)
        v = np.array([1.5, -2.0])
        cp = ControlledPath(rp.times[:, None] * v, np.zeros((17, 2, 2)), rp)
        assert np.allclose(remainder(cp, 0.25, 0.875), 0.625 * v, atol=1e-15)

    def test_shape_checks(self):
        rp = rp_1d(16)
        with pytest.raises(InvalidArgument):
            ControlledPath(np.zeros((10, 1)), np.zeros((10, 1, 1)), rp)
        with pytest.raises(InvalidArgument):
            ControlledPath(np.zeros((17, 1)), np.zeros((17, 1)), rp)
        with pytest.raises(InvalidArgument):
            remainder(const_path(rp, 1.0), 0.5, 0.25)


class TestIntegral:
    def test_constant_integrand_telescopes(self):
        rp = brownian_rough_path(make_uniform_grid(1.0, 64), 2, 3)
        c = np.array([[0.5, -1.0]])
        N = rp.grid.N
        cp = ControlledPath(np.broadcast_to(c, (N + 1, 1, 2)).copy(), np.zeros((N + 1, 1, 2, 2)), rp)
        val = rough_integral(cp, rp, 0.25, 1.0).value
        assert np.allclose(val, c @ (rp.base.values[-1] - rp.base.values[16]), atol=1e-14)

    def test_ito_oracle(self):
        errs = []
        for s in range(20):
            rp = rp_1d(2 ** 12, s)
            W = rp.base.values[:, 0]
            val = rough_integral(identity_controlled(rp), rp, 0.0, 1.0, with_bound=False).value
            errs.append(float(val) - 0.5 * (W[-1] ** 2 - 1.0))
        assert np.sqrt(np.mean(np.square(errs))) < 2e-2

    @given(st.integers(0, 1000), st.integers(1, 63))
    def test_additivity(self, seed, u):
        rp = rp_1d(64, seed)
        cp = identity_controlled(rp)
        t = rp.times
        a = rough_integral(cp, rp, 0.0, t[u], with_bound=False).value
        b = rough_integral(cp, rp, t[u], 1.0, with_bound=False).value
        c = rough_integral(cp, rp, 0.0, 1.0, with_bound=False).value
        assert np.allclose(a + b, c, atol=1e-13)

    @given(st.integers(0, 1000), st.floats(-3, 3), st.floats(-3, 3))
    def test_linearity(self, seed, a, b):
        rp = rp_1d(64, seed)
        cp1 = identity_controlled(rp)
        cp2 = ControlledPath(rp.base.values ** 2, 2 * rp.base.values[:, :, None], rp)
        lhs = rough_integral(cp1.scaled(a) + cp2.scaled(b), rp, 0.0, 1.0, with_bound=False).value
        rhs = a * rough_integral(cp1, rp, 0.0, 1.0, with_bound=False).value + \
            b * rough_integral(cp2, rp, 0.0, 1.0, with_bound=False).value
        assert np.allclose(lhs, rhs, atol=1e-12)

    def test_local_estimate_holds(self):
        for s in range(10):
            rp = rp_1d(256, s)
            W = rp.base.values
            cp = ControlledPath(np.sin(W), np.cos(W)[:, :, None], rp)
            for (lo, hi) in [(0.0, 1.0), (0.25, 0.5), (0.5, 0.53125)]:
                res = rough_integral(cp, rp, lo, hi)
                assert res.reliable
                assert np.abs(germ_defect(cp, rp, lo, hi)).max() <= res.local_bound

    def test_sewing_constant(self):
        assert sewing_constant(1.35) == pytest.approx(2 ** 1.35 * zeta(1.35))
        assert sewing_constant(1.0) == np.inf

    def test_unreliable_flag(self):
        rp = rp_1d(32)
        res = rough_integral(identity_controlled(rp), rp, 0.0, 1.0, beta=0.05)
        assert not res.reliable

    def test_integral_is_controlled(self):
        q = []
        for N in (256, 1024):
            rp = rp_1d(N, 1)
            Z = integral_path(identity_controlled(rp), rp)
            q.append(Z.remainder_holder(2 * rp.alpha))
        assert all(np.isfinite(q)) and q[1] < 3 * q[0]

    def test_shape_mismatch(self):
        rp = brownian_rough_path(make_uniform_grid(1.0, 8), 2, 0)
        cp = ControlledPath(np.zeros((9, 3)), np.zeros((9, 3, 2)), rp)
        with pytest.raises(InvalidArgument):
            rough_integral(cp, rp, 0.0, 1.0)


class TestCompose:
    def test_identity_map(self):
        rp = brownian_rough_path(make_uniform_grid(1.0, 16), 2, 0)
        cp = identity_controlled(rp)
        out = compose_smooth(lambda y: y, lambda y: np.eye(2), cp)
        assert np.array_equal(out.values, cp.values) and np.array_equal(out.deriv, cp.deriv)

    def test_constant_map(self):
        rp = rp_1d(16)
        out = compose_smooth(lambda y: np.array([2.0]), lambda y: np.zeros((1, 1)), identity_controlled(rp))
        assert np.all(out.values == 2.0) and np.all(out.deriv == 0)

    def test_square_remainder(self):
        rp = rp_1d(128, 4)
        out = compose_smooth(lambda y: y ** 2, lambda y: np.diag(2 * y), identity_controlled(rp))
        W = rp.base.values[:, 0]
        j, k = 10, 90
        assert remainder(out, rp.times[j], rp.times[k])[0] == pytest.approx((W[k] - W[j]) ** 2, abs=1e-14)
        assert out.remainder_holder(2 * rp.alpha) <= identity_controlled(rp).holder(rp.alpha) ** 2 + 1e-12

    def test_gradient_shape(self):
        rp = rp_1d(8)
        with pytest.raises(InvalidArgument):
            compose_smooth(lambda y: y, lambda y: np.eye(2), identity_controlled(rp))
