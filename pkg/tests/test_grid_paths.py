import numpy as np
import pytest
from hypothesis import given, strategies as st

from roughhjb.errors import InvalidArgument
from roughhjb.grid_paths import (PathParseError, SamplePath, TimeGrid, brownian_batch, dyadic_partitions,
                                 holder_quotient, holder_seminorm, keyed_normals, make_uniform_grid,
                                 path_from_csv, path_to_csv, sample_brownian, standard_normals)


def brute_holder(values, times, alpha):
    best = 0.0
    for j in range(len(times)):
        for k in range(j + 1, len(times)):
            best = max(best, np.linalg.norm(values[k] - values[j]) / (times[k] - times[j]) ** alpha)
    return best


class TestGrid:
    def test_quarter_grid(self):
        assert make_uniform_grid(1.0, 4).points.tolist() == [0, 0.25, 0.5, 0.75, 1.0]

    def test_minimal(self):
        assert make_uniform_grid(1.0, 1).points.tolist() == [0.0, 1.0]

    def test_spacing(self):
        assert np.all(make_uniform_grid(2.0, 8).steps == 0.25)

    @pytest.mark.parametrize("T,N", [(0.0, 4), (-1.0, 4), (1.0, 0), (1.0, 2.5)])
    def test_rejects(self, T, N):
        with pytest.raises(InvalidArgument):
            make_uniform_grid(T, N)

    def test_non_monotone(self):
        with pytest.raises(InvalidArgument):
            TimeGrid(np.array([0.0, 0.5, 0.4, 1.0]))

    @given(st.floats(0.1, 10), st.integers(1, 500))
    def test_endpoints_and_uniformity(self, T, N):
        g = make_uniform_grid(T, N)
        assert g.points[0] == 0 and g.points[-1] == T and g.N == N
        assert np.allclose(g.steps, T / N, rtol=1e-12, atol=0)

    def test_index(self):
        g = make_uniform_grid(1.0, 10)
        assert g.index(0.3) == 3
        with pytest.raises(InvalidArgument):
            g.index(0.35)


class TestBrownian:
    def test_bit_identical(self):
        g = make_uniform_grid(1.0, 64)
        assert np.array_equal(sample_brownian(g, 2, 5).values, sample_brownian(g, 2, 5).values)

    def test_starts_at_zero(self):
        assert np.all(sample_brownian(make_uniform_grid(1.0, 8), 3, 1).values[0] == 0)

    def test_terminal_variance(self):
        g = make_uniform_grid(2.0, 4)
        WT = brownian_batch(g, 1, 3, range(10_000))[:, -1, 0]
        var = WT.var(ddof=1)
        se = var * np.sqrt(2 / (WT.size - 1))
        assert abs(var - 2.0) < 5 * se

    def test_coordinates_uncorrelated(self):
        g = make_uniform_grid(1.0, 4)
        W = brownian_batch(g, 2, 9, range(5000))[:, -1]
        rho = np.corrcoef(W[:, 0], W[:, 1])[0, 1]
        assert abs(rho) < 5 / np.sqrt(5000)

    def test_distinct_seeds_differ(self):
        g = make_uniform_grid(1.0, 16)
        for s in range(100):
            assert not np.array_equal(sample_brownian(g, 1, s).values, sample_brownian(g, 1, s + 100).values)

    def test_batch_matches_single(self):
        g = make_uniform_grid(1.0, 32)
        B = brownian_batch(g, 2, 4, [0, 3])
        assert np.array_equal(B[1], sample_brownian(g, 2, 4, sample=3).values)

    def test_keyed_matches_standard(self):
        assert np.array_equal(keyed_normals((7, 2), (50, 3)), standard_normals(7, 2, (50, 3)))


class TestHolder:
    def test_constant(self):
        g = make_uniform_grid(1.0, 20)
        assert holder_seminorm(SamplePath(g, np.ones(21)), 0.5) == 0.0

    def test_identity_path(self):
        g = make_uniform_grid(1.0, 32)
        assert holder_seminorm(SamplePath(g, g.points), 0.5) == pytest.approx(1.0, abs=1e-15)

    @pytest.mark.parametrize("alpha", [0.0, 1.0, -0.2])
    def test_alpha_range(self, alpha):
        g = make_uniform_grid(1.0, 4)
        with pytest.raises(InvalidArgument):
            holder_seminorm(SamplePath(g, g.points), alpha)

    @given(st.integers(0, 10_000), st.floats(0.01, 5) | st.floats(-5, -0.01), st.floats(0.2, 0.8))
    def test_brute_force_and_homogeneity(self, seed, c, alpha):
        g = make_uniform_grid(1.0, 24)
        p = sample_brownian(g, 2, seed)
        h = holder_seminorm(p, alpha)
        assert h == pytest.approx(brute_holder(p.values, g.points, alpha), rel=1e-12)
        assert holder_seminorm(p.scaled(c), alpha) == pytest.approx(abs(c) * h, rel=1e-12, abs=1e-300)

    @given(st.integers(0, 10_000))
    def test_subadditive(self, seed):
        g = make_uniform_grid(1.0, 40)
        a, b = sample_brownian(g, 1, seed), sample_brownian(g, 1, seed + 1)
        assert holder_seminorm(a + b, 0.4) <= holder_seminorm(a, 0.4) + holder_seminorm(b, 0.4) + 1e-12

    def test_exponent_ordering(self):
        # Unit horizon: |t - s|^(a2 - a1) <= 1, so the smaller exponent gives the smaller quotient.
        g = make_uniform_grid(1.0, 128)
        for s in range(10):
            p = sample_brownian(g, 1, s)
            assert holder_seminorm(p, 0.3) <= holder_seminorm(p, 0.45) + 1e-12

    def test_subsampled_flag(self):
        g = make_uniform_grid(1.0, 64)
        p = sample_brownian(g, 1, 0)
        val, sub = holder_quotient(p.values, g.points, 0.4, exact_limit=16)
        assert sub and val <= holder_seminorm(p, 0.4) + 1e-15


class TestPartitions:
    def test_two_levels(self):
        ps = dyadic_partitions(1.0, 2)
        assert ps[0].intervals() == [(0.0, 0.5), (0.5, 1.0)]
        assert ps[1].points.tolist() == [0, 0.25, 0.5, 0.75, 1.0]

    def test_meshes(self):
        ps = dyadic_partitions(3.0, 6)
        assert ps.meshes == [3.0 * 2.0 ** -k for k in range(1, 7)]

    def test_nested(self):
        ps = dyadic_partitions(1.0, 8)
        for a, b in zip(ps.levels, ps.levels[1:]):
            assert np.all(np.isin(a.points, b.points))

    def test_levels_positive(self):
        with pytest.raises(InvalidArgument):
            dyadic_partitions(1.0, 0)


class TestCSV:
    @given(st.integers(0, 1000), st.integers(1, 3))
    def test_round_trip(self, seed, d):
        p = sample_brownian(make_uniform_grid(1.3, 17), d, seed)
        q = path_from_csv(path_to_csv(p))
        assert np.array_equal(q.values, p.values) and q.grid == p.grid

    @pytest.mark.parametrize("text,line", [
        ("", 1), ("s,x1\n0,0\n1,1\n", 1), ("t,x1\n0,0\n0.5\n", 3), ("t,x1\n0,0\n1,zz\n", 3),
        ("t,x1\n0,0\n", 2), ("t,x1\n0,0\n0,1\n", 2),
    ])
    def test_parse_errors_carry_line(self, text, line):
        with pytest.raises(PathParseError) as exc:
            path_from_csv(text)
        assert exc.value.line == line and f"line {line}" in str(exc.value)
