"""Time grids, sampled paths, Hölder seminorms and nested partitions.

Everything here is immutable after construction. Paths are stored as
``(N+1, d)`` arrays on a :class:`TimeGrid`; batched helpers work on
``(M, N+1, d)`` arrays so that Monte Carlo code does not have to loop in
Python over samples.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InvalidArgument

#: Grids with at most this many steps get the exhaustive O(N^2) Hölder sweep.
EXACT_HOLDER_LIMIT = 4096


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing times ``0 = t_0 < ... < t_N = T``."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 2:
            raise InvalidArgument("a grid needs at least two points")
        if pts[0] != 0.0:
            raise InvalidArgument("grids start at 0")
        if not np.all(np.diff(pts) > 0):
            raise InvalidArgument("grid points must be strictly increasing")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def T(self) -> float:
        return float(self.points[-1])

    @property
    def N(self) -> int:
        return self.points.size - 1

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.points)

    @property
    def mesh(self) -> float:
        return float(self.steps.max())

    def index(self, t: float, tol: float = 1e-12) -> int:
        """Index of grid time ``t``; raises if ``t`` is not a grid point."""
        k = int(np.searchsorted(self.points, t - tol * max(1.0, self.T)))
        if k > self.N or abs(self.points[k] - t) > tol * max(1.0, self.T):
            raise InvalidArgument(f"time {t!r} is not on the grid")
        return k

    def contains(self, t: float, tol: float = 1e-12) -> bool:
        try:
            self.index(t, tol)
        except InvalidArgument:
            return False
        return True

    def coarsen(self, factor: int) -> "TimeGrid":
        if factor < 1 or self.N % factor:
            raise InvalidArgument(f"cannot coarsen {self.N} steps by {factor}")
        return TimeGrid(self.points[::factor])

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash(self.points.tobytes())


def make_uniform_grid(T: float, N: int) -> TimeGrid:
    if not T > 0:
        raise InvalidArgument("horizon must be positive")
    if int(N) != N or N < 1:
        raise InvalidArgument("step count must be a positive integer")
    N = int(N)
    pts = np.arange(N + 1, dtype=float) * (T / N)
    pts[-1] = T
    return TimeGrid(pts)


def merge_grids(*grids: Iterable[float], tol: float = 1e-12) -> TimeGrid:
    """Union of several point sets, dropping near-duplicates."""
    pts = np.unique(np.concatenate([np.asarray(list(g) if not isinstance(g, np.ndarray) else g, float)
                                    for g in grids]))
    keep = np.concatenate([[True], np.diff(pts) > tol * max(1.0, pts[-1])])
    return TimeGrid(pts[keep])


@dataclass(frozen=True)
class SamplePath:
    """Values of a ``d``-dimensional path at the points of a grid."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.ndim != 2 or vals.shape[0] != self.grid.N + 1:
            raise InvalidArgument(
                f"expected {self.grid.N + 1} rows of values, got shape {vals.shape}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.grid.points

    def at(self, t: float) -> np.ndarray:
        """Piecewise-linear evaluation (exact at grid points)."""
        return np.array([np.interp(t, self.times, self.values[:, i]) for i in range(self.d)])

    def stopped(self, t: float) -> "SamplePath":
        """The path frozen at its value at ``t``."""
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        vals = self.values.copy()
        vals[k + 1:] = self.at(t) if not self.grid.contains(t) else vals[k]
        return SamplePath(self.grid, vals)

    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=0)

    def restrict(self, k_end: int) -> "SamplePath":
        """Path restricted to ``[0, t_k]``."""
        return SamplePath(TimeGrid(self.times[:k_end + 1]), self.values[:k_end + 1])

    def scaled(self, c: float) -> "SamplePath":
        return SamplePath(self.grid, c * self.values)

    def __add__(self, other: "SamplePath") -> "SamplePath":
        if self.grid != other.grid:
            raise InvalidArgument("grid mismatch")
        return SamplePath(self.grid, self.values + other.values)


# --------------------------------------------------------------------------- RNG

def _stream(seed: int, sample: int, coord: int) -> np.random.Generator:
    # Counter-based generator keyed by (seed, sample, coordinate): the draw for a
    # given key never depends on how the work is split between threads.
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, sample, coord])))


def standard_normals(seed: int, sample: int, shape: tuple[int, int]) -> np.ndarray:
    """``shape = (count, d)`` standard normals, column ``i`` from stream ``(seed, sample, i)``."""
    count, d = shape
    out = np.empty((count, d))
    for i in range(d):
        out[:, i] = _stream(seed, sample, i).standard_normal(count)
    return out


def keyed_normals(key: Sequence[int], shape: tuple[int, int]) -> np.ndarray:
    """Like :func:`standard_normals` for an arbitrary integer key; ``(seed, m)`` matches ``standard_normals(seed, m, ...)``."""
    count, d = shape
    out = np.empty((count, d))
    for i in range(d):
        ss = np.random.SeedSequence([int(v) for v in key] + [i])
        out[:, i] = np.random.Generator(np.random.Philox(ss)).standard_normal(count)
    return out


def brownian_increments(grid: TimeGrid, d: int, seed: int, sample: int = 0) -> np.ndarray:
    z = standard_normals(seed, sample, (grid.N, d))
    return z * np.sqrt(grid.steps)[:, None]


def sample_brownian(grid: TimeGrid, d: int, seed: int, sample: int = 0) -> SamplePath:
    """Brownian motion started at 0, fully determined by ``(seed, sample)``."""
    if int(d) != d or d < 1:
        raise InvalidArgument("dimension must be a positive integer")
    inc = brownian_increments(grid, int(d), seed, sample)
    vals = np.zeros((grid.N + 1, int(d)))
    np.cumsum(inc, axis=0, out=vals[1:])
    return SamplePath(grid, vals)


def brownian_batch(grid: TimeGrid, d: int, seed: int, samples: Sequence[int]) -> np.ndarray:
    """``(M, N+1, d)`` array of Brownian paths, row ``m`` keyed by ``samples[m]``."""
    out = np.zeros((len(samples), grid.N + 1, d))
    sq = np.sqrt(grid.steps)[:, None]
    for r, m in enumerate(samples):
        np.cumsum(standard_normals(seed, int(m), (grid.N, d)) * sq, axis=0, out=out[r, 1:])
    return out


# ------------------------------------------------------------------ Hölder norms

def _lags(N: int, exact_limit: int) -> tuple[np.ndarray, bool]:
    if N <= exact_limit:
        return np.arange(1, N + 1), False
    lags = 2 ** np.arange(int(np.log2(N)) + 1)
    return np.unique(np.append(lags[lags <= N], N)), True


def pairwise_holder(increment: Callable[[np.ndarray, np.ndarray], np.ndarray],
                    times: np.ndarray, exponent: float,
                    exact_limit: int = EXACT_HOLDER_LIMIT) -> tuple[float, bool]:
    """Sup over grid pairs ``j < k`` of ``|increment(j, k)| / (t_k - t_j)^exponent``.

    ``increment`` receives index arrays and returns the norms of the two-parameter
    quantity at those pairs. Above ``exact_limit`` steps only dyadic lags are
    swept; the second return value reports that.
    """
    N = times.size - 1
    lags, sub = _lags(N, exact_limit)
    best = 0.0
    for lag in lags:
        j = np.arange(0, N - lag + 1)
        k = j + lag
        q = increment(j, k) / (times[k] - times[j]) ** exponent
        if q.size:
            best = max(best, float(np.max(q)))
    return best, sub


def holder_quotient(values: np.ndarray, times: np.ndarray, alpha: float,
                    exact_limit: int = EXACT_HOLDER_LIMIT) -> tuple[float, bool]:
    vals = values.reshape(values.shape[0], -1)

    def inc(j, k):
        return np.linalg.norm(vals[k] - vals[j], axis=-1)

    return pairwise_holder(inc, times, alpha, exact_limit)


def holder_seminorm(path: SamplePath, alpha: float, exact_limit: int = EXACT_HOLDER_LIMIT) -> float:
    """Grid proxy for the alpha-Hölder seminorm."""
    if not 0 < alpha < 1:
        raise InvalidArgument("alpha must lie in (0, 1)")
    return holder_quotient(path.values, path.times, alpha, exact_limit)[0]


# ------------------------------------------------------------------- partitions

@dataclass(frozen=True)
class Partition:
    points: np.ndarray

    @property
    def mesh(self) -> float:
        return float(np.max(np.diff(self.points)))

    def intervals(self):
        return list(zip(self.points[:-1], self.points[1:]))


@dataclass(frozen=True)
class PartitionSequence:
    levels: tuple[Partition, ...]
    labels: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if not self.labels:
            object.__setattr__(self, "labels", tuple(range(1, len(self.levels) + 1)))
        for a, b in zip(self.levels, self.levels[1:]):
            if not np.all(np.isin(a.points, b.points)):
                raise InvalidArgument("partition sequence is not nested")

    @property
    def meshes(self) -> list[float]:
        return [p.mesh for p in self.levels]

    def __len__(self):
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)

    def __getitem__(self, i):
        return self.levels[i]


def dyadic_partitions(T: float, levels: int) -> PartitionSequence:
    """Level ``k`` (1-based) splits ``[0, T]`` into ``2^k`` equal intervals."""
    if levels < 1:
        raise InvalidArgument("need at least one level")
    parts = []
    for k in range(1, levels + 1):
        pts = np.arange(2 ** k + 1, dtype=float) * (T / 2 ** k)
        pts[-1] = T
        parts.append(Partition(pts))
    return PartitionSequence(tuple(parts), tuple(range(1, levels + 1)))


def coarsening_partitions(grid: TimeGrid, levels: int) -> PartitionSequence:
    """The grid and its successive halvings, coarsest first.

    Labels are ``log2`` of the interval count when that is an integer, else the
    interval count itself.
    """
    parts, labels = [], []
    for j in range(levels - 1, -1, -1):
        sub = grid.coarsen(2 ** j)
        parts.append(Partition(sub.points.copy()))
        n = sub.N
        labels.append(int(np.log2(n)) if n & (n - 1) == 0 else n)
    return PartitionSequence(tuple(parts), tuple(labels))


# --------------------------------------------------------------------- CSV I/O

class PathParseError(InvalidArgument):
    def __init__(self, message, line):
        super().__init__(f"line {line}: {message}")
        self.line = line


def path_to_csv(path: SamplePath) -> str:
    buf = io.StringIO()
    buf.write(",".join(["t"] + [f"x{i + 1}" for i in range(path.d)]) + "\n")
    for t, row in zip(path.times, path.values):
        buf.write(",".join(format(v, ".17g") for v in (t, *row)) + "\n")
    return buf.getvalue()


def path_from_csv(text: str) -> SamplePath:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise PathParseError("empty file", 1)
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "t" or len(header) < 2 or \
            header[1:] != [f"x{i + 1}" for i in range(len(header) - 1)]:
        raise PathParseError("header must read t,x1,...,xd", 1)
    d = len(header) - 1
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != d + 1:
            raise PathParseError(f"expected {d + 1} fields, got {len(row)}", lineno)
        try:
            data.append([float(c) for c in row])
        except ValueError as exc:
            raise PathParseError(str(exc), lineno) from None
    if len(data) < 2:
        raise PathParseError("need at least two rows", len(rows))
    arr = np.array(data)
    try:
        grid = TimeGrid(arr[:, 0])
    except InvalidArgument as exc:
        raise PathParseError(str(exc), 2) from None
    return SamplePath(grid, arr[:, 1:])


def write_path_csv(path: SamplePath, file: str | Path) -> None:
    Path(file).write_text(path_to_csv(path))


def read_path_csv(file: str | Path) -> SamplePath:
    return path_from_csv(Path(file).read_text())
