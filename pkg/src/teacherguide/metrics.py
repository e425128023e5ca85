"""Sample-set discrepancies and trajectory fidelity.

Every reduction here runs in a fixed order over fixed-size blocks, so results
are bit-stable for given inputs regardless of how callers parallelize.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_BLOCK = 1024


class MetricError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SampleSet:
    points: np.ndarray
    config_hash: str = ""
    seed_range: tuple[int, int] = (0, 0)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 2:
            raise MetricError("a sample set needs at least two points")
        if not np.all(np.isfinite(pts)):
            raise MetricError("sample set has non-finite entries")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def _points(a) -> np.ndarray:
    if isinstance(a, SampleSet):
        return a.points
    a = np.asarray(a, dtype=np.float64)
    return a[:, None] if a.ndim == 1 else a


def _pair(a, b):
    a, b = _points(a), _points(b)
    if a.shape[1] != b.shape[1]:
        raise MetricError(f"dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    return a, b


def _project(x: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    # column-by-column accumulation; a BLAS matmul may reorder sums
    out = np.zeros((x.shape[0], dirs.shape[0]))
    for j in range(x.shape[1]):
        out += x[:, j : j + 1] * dirs[:, j]
    return out


def _quantiles(sorted_x: np.ndarray, levels: np.ndarray) -> np.ndarray:
    n = sorted_x.shape[0]
    pos = levels * n - 0.5
    return np.array([np.interp(pos, np.arange(n), col) for col in sorted_x.T]).T


def wasserstein_1d(a, b) -> float:
    """2-Wasserstein distance between two 1-D empirical distributions."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == b.size:
        return float(np.sqrt(np.mean((a - b) ** 2)))
    m = max(a.size, b.size)
    levels = (np.arange(m) + 0.5) / m
    qa = _quantiles(a[:, None], levels)[:, 0]
    qb = _quantiles(b[:, None], levels)[:, 0]
    return float(np.sqrt(np.mean((qa - qb) ** 2)))


def projection_directions(dim: int, n_projections: int, rng: np.random.Generator) -> np.ndarray:
    if dim == 1:
        return np.ones((n_projections, 1))
    g = rng.standard_normal((n_projections, dim))
    return g / np.sqrt(np.sum(g * g, axis=1, keepdims=True))


def sliced_wasserstein(a, b, n_projections: int = 128, rng: np.random.Generator | int = 0) -> float:
    """Mean over random unit directions of the 1-D 2-Wasserstein distance.

    Unequal sample sizes compare quantile functions with linear
    interpolation between order statistics.
    """
    a, b = _pair(a, b)
    if n_projections < 16:
        raise MetricError("need at least 16 projections")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    dirs = projection_directions(a.shape[1], n_projections, rng)
    pa = np.sort(_project(a, dirs), axis=0)
    pb = np.sort(_project(b, dirs), axis=0)
    if pa.shape[0] != pb.shape[0]:
        m = max(pa.shape[0], pb.shape[0])
        levels = (np.arange(m) + 0.5) / m
        pa, pb = _quantiles(pa, levels), _quantiles(pb, levels)
    per_dir = np.sqrt(np.mean((pa - pb) ** 2, axis=0))
    return float(np.mean(per_dir))


def _sqdist(x, y):
    d = np.zeros((x.shape[0], y.shape[0]))
    for j in range(x.shape[1]):
        d += (x[:, j : j + 1] - y[:, j]) ** 2
    return d


def median_bandwidth(a, b, max_points: int = 1000) -> float:
    """Median pairwise distance over the pooled leading ``max_points`` of each side."""
    pool = np.concatenate([a[:max_points], b[:max_points]])
    d = _sqdist(pool, pool)
    iu = np.triu_indices(pool.shape[0], k=1)
    med = float(np.sqrt(np.median(d[iu])))
    return med if med > 0 else 1.0


def _kernel_sum(x, y, gamma, exclude_diag: bool) -> float:
    total = 0.0
    for i in range(0, x.shape[0], _BLOCK):
        for j in range(0, y.shape[0], _BLOCK):
            k = np.exp(-gamma * _sqdist(x[i : i + _BLOCK], y[j : j + _BLOCK]))
            if exclude_diag and i == j:
                np.fill_diagonal(k, 0.0)
            total += float(np.sum(k))
    return total


def mmd_rbf(a, b, bandwidth: float | str = "median", clamp: bool = True) -> float:
    """Unbiased MMD^2 with kernel ``exp(-|x - y|^2 / (2 h^2))``."""
    a, b = _pair(a, b)
    n, m = a.shape[0], b.shape[0]
    if n < 2 or m < 2:
        raise MetricError("need at least two points per side")
    h = median_bandwidth(a, b) if bandwidth == "median" else float(bandwidth)
    if not h > 0:
        raise MetricError("bandwidth must be positive")
    gamma = 1.0 / (2.0 * h * h)
    kaa = _kernel_sum(a, a, gamma, True) / (n * (n - 1))
    kbb = _kernel_sum(b, b, gamma, True) / (m * (m - 1))
    if n <= m:
        kab = _kernel_sum(a, b, gamma, False) / (n * m)
    else:
        kab = _kernel_sum(b, a, gamma, False) / (n * m)
    # sort the two within-sample terms so swapping arguments is exact
    lo, hi = sorted((kaa, kbb))
    val = lo + hi - 2.0 * kab
    return max(val, 0.0) if clamp else val


def gaussian_w2(mean_a, var_a, mean_b, var_b) -> float:
    """Squared 2-Wasserstein distance between diagonal Gaussians."""
    mean_a, mean_b = np.atleast_1d(mean_a).astype(float), np.atleast_1d(mean_b).astype(float)
    var_a, var_b = np.atleast_1d(var_a).astype(float), np.atleast_1d(var_b).astype(float)
    if np.any(var_a <= 0) or np.any(var_b <= 0):
        raise MetricError("variances must be positive")
    return float(np.sum((mean_a - mean_b) ** 2) + np.sum((np.sqrt(var_a) - np.sqrt(var_b)) ** 2))


def trajectory_endpoint_error(traj, reference) -> float:
    """Root-mean-square endpoint distance between runs started from the same ``x_T``."""
    if traj.init.shape != reference.init.shape or not np.array_equal(traj.init, reference.init):
        raise MetricError("trajectories do not share their initial state")
    diff = traj.final - reference.final
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=-1))))


def noise_floor(reference, fresh, n_projections: int = 128, rng=0) -> float:
    """Sliced-Wasserstein between a reference set and independent draws of the target."""
    return sliced_wasserstein(reference, fresh, n_projections, rng)


@dataclass(frozen=True)
class MetricReport:
    sliced_wasserstein: float
    mmd_rbf: float
    mean_error: np.ndarray
    cov_frobenius_error: float
    w2_gaussian: float | None = None
    n: int = 0
    extra: dict = field(default_factory=dict)

    def rows(self) -> list[tuple[str, float]]:
        out = [
            ("sliced_wasserstein", self.sliced_wasserstein),
            ("mmd_rbf", self.mmd_rbf),
            ("mean_error", float(np.linalg.norm(self.mean_error))),
            ("cov_frobenius_error", self.cov_frobenius_error),
        ]
        if self.w2_gaussian is not None:
            out.append(("w2_gaussian", self.w2_gaussian))
        return out

    def to_json_rows(self, config_hash: str, seed_range) -> list[dict]:
        return [
            {"config_hash": config_hash, "metric": k, "value": v, "n": self.n, "seed_range": list(seed_range)}
            for k, v in self.rows()
        ]


def metric_report(
    samples,
    reference,
    *,
    n_projections: int = 128,
    rng=0,
    mmd_points: int = 2000,
    gaussian: tuple | None = None,
) -> MetricReport:
    """Compare ``samples`` to ``reference``.

    MMD uses the leading ``mmd_points`` of each side. ``gaussian`` is an
    optional ``(mean, var)`` of the target, given only for single-Gaussian
    worlds; the W2 entry then compares the samples' moment-matched diagonal
    Gaussian to it (reported as a distance, not squared).
    """
    a, b = _pair(samples, reference)
    sw = sliced_wasserstein(a, b, n_projections, rng)
    mmd = mmd_rbf(a[:mmd_points], b[:mmd_points])
    mean_err = a.mean(axis=0) - b.mean(axis=0)
    ca = np.atleast_2d(np.cov(a, rowvar=False))
    cb = np.atleast_2d(np.cov(b, rowvar=False))
    cov_err = float(np.linalg.norm(ca - cb))
    w2 = None
    if gaussian is not None:
        w2 = float(np.sqrt(gaussian_w2(a.mean(axis=0), a.var(axis=0, ddof=1), gaussian[0], gaussian[1])))
    return MetricReport(sw, mmd, mean_err, cov_err, w2, n=a.shape[0])
