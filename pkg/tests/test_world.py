import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from teacherguide.schedule import build_schedule
from teacherguide.world import (
    CfgDenoiser,
    CfgParams,
    CountingDenoiser,
    MixtureWorld,
    StudentSpec,
    TeacherDenoiser,
    WorldError,
    cfg_combine,
    cfg_tweedie,
    log_density,
    make_student,
    marginal_params,
    teacher_denoise,
    teacher_score,
)


def test_world_validation():
    with pytest.raises(WorldError):
        MixtureWorld([0.5, 0.6], [[0.0], [1.0]], [[1.0], [1.0]], None)
    with pytest.raises(WorldError):
        MixtureWorld([1.0], [[0.0]], [[0.0]], None)
    with pytest.raises(WorldError):
        MixtureWorld([1.0], [[0.0]], [[1.0]], ("a", "b"))


def test_marginal_standard_normal(linear):
    w = MixtureWorld.standard_normal(3)
    for t in (0, 17, 500, 1000):
        p = marginal_params(w, linear, t)
        np.testing.assert_allclose(p.means, 0.0)
        np.testing.assert_allclose(p.variances, 1.0, rtol=1e-14)


def test_marginal_direct_formula(mix1d):
    s = build_schedule("linear", 2, 0.75, 0.75)  # alpha_bar(1) = 0.25
    p = marginal_params(mix1d, s, 1)
    np.testing.assert_allclose(p.means[:, 0], [-0.5, 1.0])
    np.testing.assert_allclose(p.variances[:, 0], [0.25 * 0.25 + 0.75, 0.25 * 0.5 + 0.75])


def test_marginal_clean_end(mix2d, linear):
    p = marginal_params(mix2d, linear, 0)
    np.testing.assert_array_equal(p.means, mix2d.means)
    np.testing.assert_array_equal(p.variances, mix2d.variances)


def test_unknown_condition(labelled, linear):
    with pytest.raises(WorldError):
        marginal_params(labelled, linear, 10, "bird")


def test_denoise_symmetry_center(linear):
    w = MixtureWorld.gaussian([1.0, -2.0], [0.3, 2.0])
    ab = linear.alpha_bar(400)
    _, x0 = teacher_denoise(w, linear, math.sqrt(ab) * np.array([[1.0, -2.0]]), 400)
    np.testing.assert_allclose(x0, [[1.0, -2.0]], atol=1e-12)


def test_denoise_standard_normal(linear, rng):
    w = MixtureWorld.standard_normal(2)
    x = rng.standard_normal((50, 2)) * 3
    for t in (1, 250, 999):
        _, x0 = teacher_denoise(w, linear, x, t)
        np.testing.assert_allclose(x0, math.sqrt(linear.alpha_bar(t)) * x, atol=1e-13)


@pytest.mark.parametrize("t,x", [(100, -1.3), (300, 0.4), (600, 2.2), (900, -0.7)])
def test_posterior_mean_quadrature(mix1d, linear, t, x):
    # oracle: integrate x0 * p0(x0) * N(x; sqrt(ab) x0, 1 - ab) on a fine grid
    ab = linear.alpha_bar(t)
    grid = np.linspace(-12.0, 14.0, 400001)
    prior = sum(
        w * np.exp(-0.5 * (grid - m) ** 2 / v) / math.sqrt(2 * math.pi * v)
        for w, m, v in zip(mix1d.weights, mix1d.means[:, 0], mix1d.variances[:, 0])
    )
    lik = np.exp(-0.5 * (x - math.sqrt(ab) * grid) ** 2 / (1 - ab))
    post = prior * lik
    # uniform grid and a negligible tail: the spacing cancels in the ratio
    oracle = np.sum(grid * post) / np.sum(post)
    _, x0 = teacher_denoise(mix1d, linear, np.array([[x]]), t)
    assert x0[0, 0] == pytest.approx(oracle, abs=1e-6)


def test_score_standard_normal(linear, rng):
    x = rng.standard_normal((20, 3))
    np.testing.assert_allclose(teacher_score(MixtureWorld.standard_normal(3), linear, x, 321), -x, atol=1e-13)


def test_score_finite_difference(labelled, linear, rng):
    h = 1e-4
    for _ in range(20):
        x = rng.standard_normal(2) * 2
        t = int(rng.integers(1, 1000))
        fd = np.zeros(2)
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            fd[j] = (log_density(labelled, linear, x + e, t) - log_density(labelled, linear, x - e, t)) / (2 * h)
        np.testing.assert_allclose(teacher_score(labelled, linear, x, t), fd, atol=1e-5)


def test_score_eps_identity(labelled, linear, rng):
    x = rng.standard_normal((100, 2)) * 2
    t = rng.uniform(1, 1000, size=100)
    eps, _ = teacher_denoise(labelled, linear, x, t)
    score = teacher_score(labelled, linear, x, t)
    np.testing.assert_allclose(eps, -np.sqrt(1 - linear.alpha_bar(t))[:, None] * score, atol=1e-8)


def test_score_symmetry_axis(linear):
    w = MixtureWorld([0.5, 0.5], [[-1.0, 0.3], [1.0, 0.3]], [[0.5, 1.0], [0.5, 1.0]], None)
    assert teacher_score(w, linear, np.array([0.0, 2.0]), 200)[0] == pytest.approx(0.0, abs=1e-15)


def test_far_tail_is_finite(mix2d, linear):
    eps, x0 = teacher_denoise(mix2d, linear, np.array([[1e4, -1e4]]), 5)
    assert np.all(np.isfinite(eps)) and np.all(np.isfinite(x0))


@settings(max_examples=50, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(0.5, 1000.0))
def test_tweedie_coupling(a, b, t):
    s = build_schedule()
    w = MixtureWorld([0.2, 0.3, 0.5], [[-2.0, 0.0], [0.0, 1.0], [2.0, -1.0]], [[0.3, 0.2], [0.5, 0.5], [0.2, 0.4]], ("c", "c", "d"))
    x = np.array([[a, b]])
    ab = s.alpha_bar(t)
    for model in (
        TeacherDenoiser(w, s),
        make_student(StudentSpec("biased-mean", shift=0.4), w, s),
        make_student(StudentSpec("consistency-endpoint", n_inner=8), w, s),
        CfgDenoiser(TeacherDenoiser(w, s), CfgParams(7.5)),
    ):
        for cond in (None, "c"):
            eps, x0 = model(x, t, cond)
            np.testing.assert_allclose(math.sqrt(ab) * x0 + math.sqrt(1 - ab) * eps, x, atol=1e-10 * max(1, abs(a), abs(b)))


def test_condition_partition(labelled, linear, rng):
    x = rng.standard_normal((30, 2)) * 2
    for t in (3, 200, 800):
        mixed = np.logaddexp(
            math.log(labelled.condition_prior("cat")) + log_density(labelled, linear, x, t, "cat"),
            math.log(labelled.condition_prior("dog")) + log_density(labelled, linear, x, t, "dog"),
        )
        np.testing.assert_allclose(np.exp(mixed), np.exp(log_density(labelled, linear, x, t)), rtol=1e-10)


def test_zero_shift_student_is_teacher(mix2d, linear, rng):
    x = rng.standard_normal((40, 2))
    student = make_student(StudentSpec("biased-mean", shift=0.0), mix2d, linear)
    a, b = student(x, 500), TeacherDenoiser(mix2d, linear)(x, 500)
    np.testing.assert_allclose(a.x0, b.x0, atol=1e-12)
    np.testing.assert_allclose(a.eps, b.eps, atol=1e-12)


def test_biased_weights_renormalize(mix2d, linear):
    student = make_student(StudentSpec("biased-weights", perturbation=[0.1, -0.1]), mix2d, linear)
    assert student.world.weights.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(student.world.weights, [0.6, 0.4])
    clipped = mix2d.reweighted([0.9, -0.9])
    assert np.all(clipped.weights >= 0) and clipped.weights.sum() == pytest.approx(1.0)


def test_student_spec_validation(mix2d, linear):
    with pytest.raises(WorldError):
        StudentSpec("consistency-endpoint", n_inner=4)
    with pytest.raises(WorldError):
        StudentSpec("biased-mean")
    with pytest.raises(WorldError):
        make_student(StudentSpec("biased-weights", perturbation=[0.1]), mix2d, linear)
    spec = StudentSpec.from_dict({"kind": "biased-mean", "params": {"shift": [0.1, 0.2]}})
    assert StudentSpec.from_dict(spec.to_dict()) == spec


def _ab_oracle(t):
    # log-linear interpolation of the directly computed running product
    n, lo, hi = 1000, 1e-4, 2e-2
    logs, acc = [0.0], 0.0
    for i in range(n):
        acc += math.log(1.0 - (lo + (hi - lo) * i / (n - 1)))
        logs.append(acc)
    i = int(math.floor(t))
    if i == t:
        return math.exp(logs[i])
    f = t - i
    return math.exp((1 - f) * logs[i] + f * logs[i + 1])


def test_consistency_cascade(linear, rng):
    student = make_student(StudentSpec("consistency-endpoint", n_inner=1024), MixtureWorld.standard_normal(2), linear)
    x = rng.standard_normal((5, 2))
    c = 1.0
    for j in range(1024):
        a, b = _ab_oracle(1000 * (1 - j / 1024)), _ab_oracle(1000 * (1 - (j + 1) / 1024))
        c *= math.sqrt(a * b) + math.sqrt((1 - a) * (1 - b))
    np.testing.assert_allclose(student(x, 1000).x0, c * x, rtol=1e-9)


def test_cfg_combine_values():
    cond, unc = np.array([1.0, 0.0]), np.array([0.0, 0.0])
    np.testing.assert_array_equal(cfg_combine(cond, unc, CfgParams(7.5)), [7.5, 0.0])
    c2, u2 = np.array([0.3, -1.1]), np.array([2.0, 0.4])
    np.testing.assert_array_equal(cfg_combine(c2, u2, 1.0), c2)
    np.testing.assert_array_equal(cfg_combine(c2, u2, 0.0), u2)
    with pytest.raises(WorldError):
        cfg_combine(np.zeros(2), np.zeros(3), 2.0)
    with pytest.raises(WorldError):
        CfgParams(-1.0)


def test_cfg_tweedie(linear, labelled, rng):
    x = rng.standard_normal((10, 2))
    np.testing.assert_allclose(cfg_tweedie(x, 300, np.zeros_like(x), linear), x / math.sqrt(linear.alpha_bar(300)))
    np.testing.assert_array_equal(cfg_tweedie(x, 0, rng.standard_normal((10, 2)), linear), x)
    base = TeacherDenoiser(labelled, linear)
    wrapped = CfgDenoiser(base, CfgParams(1.0))
    np.testing.assert_allclose(wrapped(x, 300, "dog").x0, base(x, 300, "dog").x0, atol=1e-12)


def test_counting_denoiser_rows(mix2d, linear, rng):
    model = CountingDenoiser(TeacherDenoiser(mix2d, linear))
    model(rng.standard_normal((7, 2)), 10)
    model(rng.standard_normal(2), 10)
    assert model.calls == 8


def test_world_round_trip(labelled):
    again = MixtureWorld.from_dict(labelled.to_dict())
    assert again.to_dict() == labelled.to_dict()
    assert labelled.conditions == ("cat", "dog")


def test_sample_moments(mix2d):
    draws = mix2d.sample(200000, np.random.default_rng(1))
    np.testing.assert_allclose(draws.mean(axis=0), mix2d.mean(), atol=0.02)
    np.testing.assert_allclose(np.cov(draws, rowvar=False), mix2d.covariance(), atol=0.03)


def test_single_component_path_matches_mixture(linear, rng):
    one = MixtureWorld.gaussian([0.5, -1.0], [0.7, 1.3])
    twin = MixtureWorld([0.5, 0.5], [[0.5, -1.0]] * 2, [[0.7, 1.3]] * 2, None)
    x = rng.standard_normal((50, 2)) * 3
    t = rng.uniform(0, 1000, size=50)
    for fn in (teacher_denoise, teacher_score, log_density):
        a, b = fn(one, linear, x, t), fn(twin, linear, x, t)
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
