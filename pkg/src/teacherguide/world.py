"""Gaussian-mixture data worlds and the denoisers evaluated on them.

A condition label selects the subset of components carrying that label;
``condition=None`` is the null condition and selects the whole mixture, so
conditional and unconditional predictions are both exact.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, NamedTuple, Sequence

import numpy as np
from scipy.special import logsumexp

from .schedule import NoiseSchedule

DENOISER_TAGS = ("teacher-exact", "student-biased", "student-consistency", "cfg-wrapped", "teacher-guided")
STUDENT_KINDS = ("biased-mean", "biased-weights", "consistency-endpoint")


class WorldError(ValueError):
    pass


@dataclass(frozen=True)
class Component:
    weight: float
    mean: tuple[float, ...]
    var: tuple[float, ...]
    condition: str | None = None

    def to_dict(self) -> dict:
        return {"weight": self.weight, "mean": list(self.mean), "var": list(self.var), "condition": self.condition}


@dataclass(frozen=True, eq=False)
class MixtureWorld:
    """Weighted diagonal-covariance Gaussian mixture in ``R^dim``."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    labels: tuple[str | None, ...]

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        mu = np.atleast_2d(np.array(self.means, dtype=np.float64))
        v = np.atleast_2d(np.array(self.variances, dtype=np.float64))
        if w.ndim != 1 or w.size == 0:
            raise WorldError("weights must be a non-empty vector")
        if mu.shape != (w.size, mu.shape[1]) or v.shape != mu.shape:
            raise WorldError("means and variances must be (components, dim)")
        if np.any(w < 0) or not np.isclose(w.sum(), 1.0, rtol=0, atol=1e-12):
            raise WorldError(f"weights must be non-negative and sum to 1 (sum={w.sum()!r})")
        if np.any(v <= 0):
            raise WorldError("variances must be positive")
        labels = tuple(self.labels) if self.labels is not None else (None,) * w.size
        if len(labels) != w.size:
            raise WorldError("one condition label per component")
        for a in (w, mu, v):
            a.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", v)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_components(cls, components: Sequence[Component]) -> MixtureWorld:
        return cls(
            weights=[c.weight for c in components],
            means=[c.mean for c in components],
            variances=[c.var for c in components],
            labels=tuple(c.condition for c in components),
        )

    @classmethod
    def from_dict(cls, data: dict) -> MixtureWorld:
        comps = data["components"] if isinstance(data, dict) else data
        return cls.from_components(
            [
                Component(
                    weight=float(c["weight"]),
                    mean=tuple(float(m) for m in c["mean"]),
                    var=tuple(float(s) for s in c["var"]),
                    condition=c.get("condition"),
                )
                for c in comps
            ]
        )

    @classmethod
    def gaussian(cls, mean, var) -> MixtureWorld:
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        var = np.broadcast_to(np.asarray(var, dtype=np.float64), mean.shape)
        return cls([1.0], [mean], [var], (None,))

    @classmethod
    def standard_normal(cls, dim: int) -> MixtureWorld:
        return cls.gaussian(np.zeros(dim), 1.0)

    def to_dict(self) -> dict:
        return {"components": [c.to_dict() for c in self.components]}

    @property
    def components(self) -> list[Component]:
        return [
            Component(float(w), tuple(map(float, m)), tuple(map(float, v)), lab)
            for w, m, v, lab in zip(self.weights, self.means, self.variances, self.labels)
        ]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def conditions(self) -> tuple[str, ...]:
        return tuple(sorted({lab for lab in self.labels if lab is not None}))

    def condition_prior(self, condition: str) -> float:
        return float(self.weights[[lab == condition for lab in self.labels]].sum())

    def select(self, condition: str | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Renormalized ``(weights, means, variances)`` for a condition, zero-weight components dropped."""
        if condition is None:
            keep = self.weights > 0
        else:
            mask = np.array([lab == condition for lab in self.labels])
            if not mask.any():
                raise WorldError(f"unknown condition label {condition!r}")
            keep = mask & (self.weights > 0)
            if not keep.any():
                raise WorldError(f"condition {condition!r} has no weight")
        w = self.weights[keep]
        return w / w.sum(), self.means[keep], self.variances[keep]

    def shifted(self, shift) -> MixtureWorld:
        shift = np.broadcast_to(np.asarray(shift, dtype=np.float64), self.means.shape)
        return MixtureWorld(self.weights, self.means + shift, self.variances, self.labels)

    def reweighted(self, perturbation) -> MixtureWorld:
        w = np.maximum(self.weights + np.asarray(perturbation, dtype=np.float64), 0.0)
        if w.sum() <= 0:
            raise WorldError("perturbation removes all weight")
        return MixtureWorld(w / w.sum(), self.means, self.variances, self.labels)

    def sample(self, n: int, rng: np.random.Generator, condition: str | None = None) -> np.ndarray:
        w, mu, v = self.select(condition)
        idx = rng.choice(w.size, size=n, p=w)
        z = rng.standard_normal((n, self.dim))
        return mu[idx] + np.sqrt(v[idx]) * z

    def mean(self, condition: str | None = None) -> np.ndarray:
        w, mu, _ = self.select(condition)
        return np.sum(w[:, None] * mu, axis=0)

    def covariance(self, condition: str | None = None) -> np.ndarray:
        w, mu, v = self.select(condition)
        m = np.sum(w[:, None] * mu, axis=0)
        d = mu - m
        cov = np.einsum("k,ki,kj->ij", w, d, d)
        return cov + np.diag(np.sum(w[:, None] * v, axis=0))


class MixtureParams(NamedTuple):
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray


def marginal_params(world: MixtureWorld, schedule: NoiseSchedule, t: float, condition: str | None = None) -> MixtureParams:
    """Mixture parameters of ``p_t`` for the given condition."""
    ab = schedule.alpha_bar(t)
    w, mu, v = world.select(condition)
    return MixtureParams(w, np.sqrt(ab) * mu, ab * v + (1.0 - ab))


class _Posterior(NamedTuple):
    x0: np.ndarray
    eps: np.ndarray
    score: np.ndarray
    log_density: np.ndarray


def _posterior(world: MixtureWorld, schedule: NoiseSchedule, x, t, condition) -> _Posterior:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != world.dim:
        raise WorldError(f"expected last axis {world.dim}, got shape {x.shape}")
    w, mu, v = world.select(condition)
    ab = np.asarray(schedule.alpha_bar(t), dtype=np.float64)
    ab = np.broadcast_to(ab, x.shape[:-1])[..., None, None]
    sab = np.sqrt(ab)
    s = ab * v + (1.0 - ab)
    if w.size == 1:
        # one component: responsibility is exactly 1, skip the mixture reduction
        s1, d1 = s[..., 0, :], x - sab[..., 0, :] * mu[0]
        white = d1 / s1
        logp1 = -0.5 * np.sum(d1**2 / s1 + np.log(2 * np.pi * s1), axis=-1)
        return _Posterior(mu[0] + sab[..., 0, :] * v[0] * white, np.sqrt(1.0 - ab[..., 0, 0])[..., None] * white, -white, logp1)
    diff = x[..., None, :] - sab * mu
    # log domain: far-tail probes would underflow plain densities
    logp = np.log(w) - 0.5 * np.sum(diff**2 / s + np.log(2 * np.pi * s), axis=-1)
    lse = logsumexp(logp, axis=-1, keepdims=True)
    resp = np.exp(logp - lse)[..., None]
    whitened = diff / s
    x0 = np.sum(resp * (mu + sab * v * whitened), axis=-2)
    score = -np.sum(resp * whitened, axis=-2)
    eps = -np.sqrt(1.0 - ab[..., 0]) * score
    return _Posterior(x0, eps, score, lse[..., 0])


def teacher_denoise(world, schedule, x, t, condition=None) -> tuple[np.ndarray, np.ndarray]:
    """Exact ``(eps_hat, x0_hat)`` with ``x0_hat = E[x0 | x_t]``."""
    post = _posterior(world, schedule, x, t, condition)
    return post.eps, post.x0


def teacher_score(world, schedule, x, t, condition=None) -> np.ndarray:
    return _posterior(world, schedule, x, t, condition).score


def log_density(world, schedule, x, t, condition=None) -> np.ndarray:
    return _posterior(world, schedule, x, t, condition).log_density


def tweedie_x0(x, eps, alpha_bar):
    alpha_bar = np.asarray(alpha_bar, dtype=np.float64)[..., None] if np.ndim(alpha_bar) else alpha_bar
    return (x - np.sqrt(1.0 - alpha_bar) * eps) / np.sqrt(alpha_bar)


def tweedie_eps(x, x0, alpha_bar):
    ab = np.asarray(alpha_bar, dtype=np.float64)
    ab = ab[..., None] if ab.ndim else ab
    noise = np.sqrt(1.0 - ab)
    safe = np.where(noise > 0, noise, 1.0)
    return np.where(noise > 0, (x - np.sqrt(ab) * x0) / safe, 0.0)


class Prediction(NamedTuple):
    eps: np.ndarray
    x0: np.ndarray


class Denoiser:
    """Callable ``(x, t, condition) -> Prediction``.

    ``x`` has shape ``(..., dim)``; ``t`` is a scalar or broadcasts against
    ``x.shape[:-1]``. Every prediction satisfies the Tweedie coupling
    ``x = sqrt(ab) * x0 + sqrt(1 - ab) * eps``.
    """

    tag: str = "teacher-exact"
    schedule: NoiseSchedule

    def __call__(self, x, t, condition=None) -> Prediction:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class TeacherDenoiser(Denoiser):
    world: MixtureWorld
    schedule: NoiseSchedule
    tag: str = "teacher-exact"

    def __call__(self, x, t, condition=None) -> Prediction:
        eps, x0 = teacher_denoise(self.world, self.schedule, x, t, condition)
        return Prediction(eps, x0)


def _ddim_endpoint(teacher: Denoiser, x, t, n_inner: int, condition) -> np.ndarray:
    schedule = teacher.schedule
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), np.shape(x)[:-1])
    for j in range(n_inner):
        t_cur = t * (1.0 - j / n_inner)
        t_next = t * (1.0 - (j + 1) / n_inner)
        pred = teacher(x, t_cur, condition)
        ab_next = np.asarray(schedule.alpha_bar(t_next))[..., None]
        x = np.sqrt(ab_next) * pred.x0 + np.sqrt(1.0 - ab_next) * pred.eps
    return x


@dataclass(frozen=True, eq=False)
class ConsistencyStudent(Denoiser):
    """Predicts the probability-flow endpoint by ``n_inner`` teacher DDIM steps from ``t`` to 0."""

    teacher: TeacherDenoiser
    n_inner: int
    tag: str = "student-consistency"

    @property
    def schedule(self) -> NoiseSchedule:
        return self.teacher.schedule

    def __call__(self, x, t, condition=None) -> Prediction:
        x = np.asarray(x, dtype=np.float64)
        x0 = _ddim_endpoint(self.teacher, x, t, self.n_inner, condition)
        eps = tweedie_eps(x, x0, self.schedule.alpha_bar(t))
        return Prediction(eps, x0)


@dataclass(frozen=True)
class StudentSpec:
    kind: str
    shift: Any = None
    perturbation: Any = None
    n_inner: int | None = None

    def __post_init__(self):
        if self.kind not in STUDENT_KINDS:
            raise WorldError(f"unknown student kind {self.kind!r}")
        if self.kind == "biased-mean" and self.shift is None:
            raise WorldError("biased-mean student needs a shift")
        if self.kind == "biased-weights" and self.perturbation is None:
            raise WorldError("biased-weights student needs a perturbation vector")
        if self.kind == "consistency-endpoint" and (self.n_inner is None or int(self.n_inner) < 8):
            raise WorldError("consistency-endpoint student needs n_inner >= 8")

    @property
    def params(self) -> dict:
        if self.kind == "biased-mean":
            return {"shift": np.asarray(self.shift, dtype=float).tolist()}
        if self.kind == "biased-weights":
            return {"perturbation": np.asarray(self.perturbation, dtype=float).tolist()}
        return {"n_inner": int(self.n_inner)}

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params}

    @classmethod
    def from_dict(cls, data: dict) -> StudentSpec:
        params = dict(data.get("params") or {})
        unknown = set(params) - {"shift", "perturbation", "n_inner"}
        if unknown:
            raise WorldError(f"unknown student params {sorted(unknown)}")
        return cls(kind=data["kind"], **params)


def make_student(spec: StudentSpec, world: MixtureWorld, schedule: NoiseSchedule) -> Denoiser:
    if spec.kind == "biased-mean":
        shift = np.asarray(spec.shift, dtype=np.float64)
        try:
            np.broadcast_to(shift, world.means.shape)
        except ValueError as exc:
            raise WorldError(f"shift shape {shift.shape} incompatible with {world.means.shape}") from exc
        return TeacherDenoiser(world.shifted(shift), schedule, tag="student-biased")
    if spec.kind == "biased-weights":
        pert = np.asarray(spec.perturbation, dtype=np.float64)
        if pert.shape != world.weights.shape:
            raise WorldError("perturbation must have one entry per component")
        return TeacherDenoiser(world.reweighted(pert), schedule, tag="student-biased")
    return ConsistencyStudent(TeacherDenoiser(world, schedule), int(spec.n_inner))


@dataclass(frozen=True)
class CfgParams:
    w: float = 1.0

    def __post_init__(self):
        if not (self.w >= 0):
            raise WorldError("CFG scale must be non-negative")


def cfg_combine(cond_eps, uncond_eps, params: CfgParams | float) -> np.ndarray:
    w = params.w if isinstance(params, CfgParams) else float(params)
    cond_eps = np.asarray(cond_eps, dtype=np.float64)
    uncond_eps = np.asarray(uncond_eps, dtype=np.float64)
    if cond_eps.shape != uncond_eps.shape:
        raise WorldError(f"dimension mismatch {cond_eps.shape} vs {uncond_eps.shape}")
    if w == 1.0:
        return cond_eps.copy()
    return uncond_eps + w * (cond_eps - uncond_eps)


def cfg_tweedie(x, t, combined_eps, schedule: NoiseSchedule) -> np.ndarray:
    return tweedie_x0(np.asarray(x, dtype=np.float64), combined_eps, schedule.alpha_bar(t))


@dataclass(frozen=True, eq=False)
class CfgDenoiser(Denoiser):
    """Classifier-free guidance around ``base``; the null condition bypasses the combiner."""

    base: Denoiser
    params: CfgParams = CfgParams()
    tag: str = "cfg-wrapped"

    @property
    def schedule(self) -> NoiseSchedule:
        return self.base.schedule

    def __call__(self, x, t, condition=None) -> Prediction:
        if condition is None:
            return self.base(x, t, None)
        cond = self.base(x, t, condition)
        uncond = self.base(x, t, None)
        eps = cfg_combine(cond.eps, uncond.eps, self.params)
        return Prediction(eps, cfg_tweedie(x, t, eps, self.schedule))


@dataclass(eq=False)
class CountingDenoiser(Denoiser):
    """Counts denoising rounds, one per evaluated row."""

    inner: Denoiser
    calls: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def tag(self) -> str:
        return self.inner.tag

    @property
    def schedule(self) -> NoiseSchedule:
        return self.inner.schedule

    def __call__(self, x, t, condition=None) -> Prediction:
        rows = int(np.prod(np.shape(x)[:-1], dtype=np.int64))
        with self._lock:
            self.calls += rows
        return self.inner(x, t, condition)
