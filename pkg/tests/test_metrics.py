import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from teacherguide.metrics import (
    MetricError,
    SampleSet,
    gaussian_w2,
    metric_report,
    mmd_rbf,
    noise_floor,
    sliced_wasserstein,
    trajectory_endpoint_error,
    wasserstein_1d,
)
from teacherguide.schedule import build_schedule, custom_grid, make_grid
from teacherguide.solvers import sample
from teacherguide.world import MixtureWorld, StudentSpec, TeacherDenoiser, make_student


def test_sample_set_validation():
    with pytest.raises(MetricError):
        SampleSet(np.zeros((1, 2)))
    with pytest.raises(MetricError):
        SampleSet(np.array([[0.0], [np.nan]]))
    s = SampleSet(np.arange(6.0), "abc", (0, 6))
    assert s.n == 6 and s.dim == 1 and not s.points.flags.writeable


def test_sw_identical_is_zero(rng):
    a = rng.standard_normal((300, 3))
    assert sliced_wasserstein(a, a) == 0.0


def test_sw_point_masses():
    for c in (0.5, -2.0, 7.0):
        a, b = np.zeros((10, 1)), np.full((10, 1), c)
        for n_proj in (16, 50):
            assert sliced_wasserstein(a, b, n_proj) == pytest.approx(abs(c), rel=1e-15)


def test_sw_shifted_gaussians():
    g = np.random.default_rng(0)
    m = 0.8
    a, b = g.standard_normal((100000, 1)), g.standard_normal((100000, 1)) + m
    assert sliced_wasserstein(a, b) == pytest.approx(m, abs=0.02)


def test_sw_errors(rng):
    with pytest.raises(MetricError):
        sliced_wasserstein(rng.standard_normal((5, 2)), rng.standard_normal((5, 3)))
    with pytest.raises(MetricError):
        sliced_wasserstein(rng.standard_normal((5, 2)), rng.standard_normal((5, 2)), n_projections=8)


def test_sw_unequal_sizes_quantiles():
    # quantile functions of {0, 1} and {0, 1/3, 2/3, 1} at levels (i + 0.5) / 4
    a = np.array([[0.0], [1.0]])
    b = np.array([[0.0], [1 / 3], [2 / 3], [1.0]])
    qa = np.interp(np.arange(4) / 4 + 0.125, [0.25, 0.75], [0.0, 1.0])
    qb = np.array([0.0, 1 / 3, 2 / 3, 1.0])
    expect = math.sqrt(np.mean((qa - qb) ** 2))
    assert sliced_wasserstein(a, b) == pytest.approx(expect, rel=1e-14)
    assert wasserstein_1d(a, b) == pytest.approx(expect, rel=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(5, 60), st.integers(5, 60))
def test_symmetry(seed, n, m):
    g = np.random.default_rng(seed)
    a, b = g.standard_normal((n, 2)), g.standard_normal((m, 2)) + 0.5
    assert abs(sliced_wasserstein(a, b, 32, 1) - sliced_wasserstein(b, a, 32, 1)) <= 1e-12
    assert abs(mmd_rbf(a, b, clamp=False) - mmd_rbf(b, a, clamp=False)) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 10.0))
def test_sw_scaling_1d(seed, c):
    g = np.random.default_rng(seed)
    a, b = g.standard_normal((40, 1)), g.standard_normal((40, 1))
    assert sliced_wasserstein(c * a, c * b) == pytest.approx(c * sliced_wasserstein(a, b), rel=1e-12)


def test_mmd_permuted_copy(rng):
    a = rng.standard_normal((500, 2))
    val = mmd_rbf(a, rng.permutation(a), clamp=False)
    assert abs(val) < 5e-3


def test_mmd_far_clusters(rng):
    a = rng.standard_normal((200, 2)) * 0.1
    b = a + 100.0
    assert mmd_rbf(a, b, bandwidth=1.0) == pytest.approx(2.0, abs=0.1)
    with pytest.raises(MetricError):
        mmd_rbf(a[:1], b)
    with pytest.raises(MetricError):
        mmd_rbf(a, b, bandwidth=0.0)


def test_mmd_permutation_null():
    g = np.random.default_rng(42)
    a, b = g.standard_normal((1000, 2)), g.standard_normal((1000, 2))
    observed = mmd_rbf(a, b, clamp=False)
    pool = np.concatenate([a, b])
    null = []
    for _ in range(50):
        idx = g.permutation(2000)
        null.append(mmd_rbf(pool[idx[:1000]], pool[idx[1000:]], clamp=False))
    assert abs(observed) < 3 * np.std(null)


def test_mmd_blocking_matches_dense(rng):
    a, b = rng.standard_normal((1500, 2)), rng.standard_normal((1300, 2)) + 0.2
    h = 0.9
    gamma = 1 / (2 * h * h)

    def k(x, y):
        return np.exp(-gamma * ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1))

    kaa, kbb, kab = k(a, a), k(b, b), k(a, b)
    n, m = len(a), len(b)
    dense = (kaa.sum() - np.trace(kaa)) / (n * (n - 1)) + (kbb.sum() - np.trace(kbb)) / (m * (m - 1)) - 2 * kab.mean()
    assert mmd_rbf(a, b, bandwidth=h, clamp=False) == pytest.approx(dense, abs=1e-12)


def test_gaussian_w2():
    assert gaussian_w2([1.0, 2.0], [0.5, 3.0], [1.0, 2.0], [0.5, 3.0]) == 0.0
    assert math.sqrt(gaussian_w2(0.0, 1.0, 1.7, 1.0)) == pytest.approx(1.7)
    assert gaussian_w2(0.0, 4.0, 0.0, 1.0) == pytest.approx(1.0)
    with pytest.raises(MetricError):
        gaussian_w2(0.0, 0.0, 0.0, 1.0)


def test_endpoint_error(linear, mix2d, rng):
    teacher = TeacherDenoiser(mix2d, linear)
    init = rng.standard_normal((20, 2))
    ref = sample(teacher, "ddim", make_grid(linear, 50), linear, init=init)
    assert trajectory_endpoint_error(ref, ref) == 0.0
    other = sample(teacher, "ddim", make_grid(linear, 5), linear, init=rng.standard_normal((20, 2)))
    with pytest.raises(MetricError):
        trajectory_endpoint_error(other, ref)


def test_ddim_error_halves():
    s = build_schedule("cosine", 4096, 1e-8, 0.999)
    teacher = TeacherDenoiser(MixtureWorld.gaussian([0.0], [1.0]), s)
    init = np.random.default_rng(1).standard_normal((64, 1))
    ref = sample(teacher, "ddim", make_grid(s, 4096), s, init=init)
    e16 = trajectory_endpoint_error(sample(teacher, "ddim", make_grid(s, 16), s, init=init), ref)
    e32 = trajectory_endpoint_error(sample(teacher, "ddim", make_grid(s, 32), s, init=init), ref)
    assert e16 / e32 == pytest.approx(2.0, rel=0.2)


def test_consistency_beats_biased_mean(mix2d, linear, rng):
    teacher = TeacherDenoiser(mix2d, linear)
    init = rng.standard_normal((100, 2))
    ref = sample(teacher, "ddim", make_grid(linear, 1000), linear, init=init)
    errs = {}
    for spec in (StudentSpec("consistency-endpoint", n_inner=1024), StudentSpec("biased-mean", shift=0.5)):
        traj = sample(make_student(spec, mix2d, linear), "ddim", custom_grid((1000, 0)), linear, init=init)
        errs[spec.kind] = trajectory_endpoint_error(traj, ref)
    assert errs["consistency-endpoint"] < errs["biased-mean"]


def test_noise_floor_single_gaussian(linear):
    world = MixtureWorld.gaussian([0.5, -0.5], [1.0, 0.5])
    teacher = TeacherDenoiser(world, linear)
    g = np.random.default_rng(8)
    ref = sample(teacher, "ddim", make_grid(linear, 1000), linear, init=g.standard_normal((10000, 2))).final
    floor = noise_floor(ref, world.sample(10000, g), 128, 0)
    # 1-D order of the estimator at n = 1e4 with unit-scale data
    assert 0 < floor < 0.05


def test_report(rng):
    a, b = rng.standard_normal((400, 2)), rng.standard_normal((300, 2)) + [0.3, 0.0]
    rep = metric_report(a, b, gaussian=(np.zeros(2), np.ones(2)))
    names = [k for k, _ in rep.rows()]
    assert names == ["sliced_wasserstein", "mmd_rbf", "mean_error", "cov_frobenius_error", "w2_gaussian"]
    assert all(v >= 0 for _, v in rep.rows())
    rows = rep.to_json_rows("h", (0, 400))
    assert rows[0] == {"config_hash": "h", "metric": "sliced_wasserstein", "value": rep.sliced_wasserstein, "n": 400, "seed_range": [0, 400]}
    assert metric_report(a, b).w2_gaussian is None
