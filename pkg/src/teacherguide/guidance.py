"""Teacher guidance for student samplers.

The student's denoised estimate is pulled toward a teacher estimate obtained
by renoising the student estimate to time ``s`` and denoising it with the
teacher. The pull is a convex interpolation with weight ``lam``; it is also a
proximal gradient step on a score-distillation loss, and (at matched noise
level) a guidance-style correction of the student's epsilon.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .rng import TrajectoryRng
from .schedule import NoiseSchedule, TimeGrid
from .solvers import SolverKind, Trajectory, sample
from .world import CfgDenoiser, CfgParams, CountingDenoiser, Denoiser

RENOISE_MODES = ("decreasing", "same", "random")
GUIDANCE_MODES = ("interp", "reparam")


class GuidanceError(ValueError):
    pass


def lambda_from_gamma(gamma: float, t: float, schedule: NoiseSchedule) -> float:
    ab = schedule.alpha_bar(t)
    return 2.0 * gamma * math.sqrt(ab) / math.sqrt(1.0 - ab)


def gamma_from_lambda(lam: float, t: float, schedule: NoiseSchedule) -> float:
    ab = schedule.alpha_bar(t)
    return lam * math.sqrt(1.0 - ab) / (2.0 * math.sqrt(ab))


@dataclass(frozen=True)
class GuidanceConfig:
    """``lam`` is the primary knob; when ``gamma`` is set it wins and ``lam`` is derived per step."""

    lam: float = 0.02
    k: int = 1
    renoise: str = "decreasing"
    mode: str = "interp"
    teacher_w: float = 7.5
    gamma: float | None = None
    revise_uncond: bool = False

    def __post_init__(self):
        if not (0.0 <= self.lam <= 1.0):
            raise GuidanceError("lambda must lie in [0, 1]")
        if int(self.k) != self.k or self.k < 0:
            raise GuidanceError("k must be a non-negative integer")
        if self.renoise not in RENOISE_MODES:
            raise GuidanceError(f"renoise must be one of {RENOISE_MODES}")
        if self.mode not in GUIDANCE_MODES:
            raise GuidanceError(f"mode must be one of {GUIDANCE_MODES}")
        if not (self.teacher_w >= 0):
            raise GuidanceError("teacher_w must be non-negative")
        if self.gamma is not None and not (self.gamma > 0):
            raise GuidanceError("gamma must be positive")
        object.__setattr__(self, "k", int(self.k))

    @property
    def enabled(self) -> bool:
        return self.k > 0 and (self.gamma is not None or self.lam > 0)

    def lambda_at(self, t: float, schedule: NoiseSchedule) -> float:
        if self.gamma is None:
            return self.lam
        return lambda_from_gamma(self.gamma, t, schedule)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, data: dict) -> GuidanceConfig:
        data = dict(data)
        unknown = set(data) - {"lambda", "k", "renoise", "mode", "teacher_w", "gamma", "revise_uncond"}
        if unknown:
            raise GuidanceError(f"unknown guidance keys {sorted(unknown)}")
        if "lambda" in data:
            data["lam"] = data.pop("lambda")
        return cls(**data)


def _col(a):
    a = np.asarray(a, dtype=np.float64)
    return a[..., None] if a.ndim else a


def renoise(x0, s, schedule: NoiseSchedule, rng=None, eps=None) -> tuple[np.ndarray, np.ndarray]:
    """``x_s = sqrt(ab_s) x0 + sqrt(1 - ab_s) eps``; ``s`` may be per-row."""
    x0 = np.asarray(x0, dtype=np.float64)
    if eps is None:
        if rng is None:
            raise GuidanceError("need rng or eps")
        eps = rng.standard_normal(x0.shape)
    ab = _col(schedule.alpha_bar(s))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps, eps


@dataclass(frozen=True, eq=False)
class SdsEvaluation:
    loss: np.ndarray
    residual: np.ndarray
    coefficient: np.ndarray
    eps_used: np.ndarray
    s: np.ndarray | float
    x_s: np.ndarray
    x0_teacher: np.ndarray
    forms: tuple[np.ndarray, np.ndarray, np.ndarray]


def _sq(v):
    return np.sum(v * v, axis=-1)


def sds_loss(x, teacher: Denoiser, s, schedule: NoiseSchedule, rng=None, eps=None, condition=None) -> SdsEvaluation:
    """Score-distillation loss of ``x`` under ``teacher`` at renoise time ``s``.

    The three forms are the epsilon residual, the same residual written through
    the denoised estimates, and the weighted clean-space distance. ``loss`` is
    the last one.
    """
    x = np.asarray(x, dtype=np.float64)
    ab = np.asarray(schedule.alpha_bar(s), dtype=np.float64)
    if np.any(ab >= 1.0):
        raise GuidanceError("renoise time with alpha_bar = 1 makes the loss weight singular")
    x_s, eps = renoise(x, s, schedule, rng, eps)
    pred = teacher(x_s, s, condition)
    abc = _col(ab)
    noise = np.sqrt(1.0 - abc)
    coef = ab / (1.0 - ab)
    residual = x - pred.x0
    f1 = _sq(pred.eps - eps)
    f2 = _sq((x_s - np.sqrt(abc) * pred.x0) / noise - (x_s - np.sqrt(abc) * x) / noise)
    f3 = coef * _sq(residual)
    return SdsEvaluation(f3, residual, coef, eps, s, x_s, pred.x0, (f1, f2, f3))


def sds_gradient(x, teacher: Denoiser, s, schedule: NoiseSchedule, eps, condition=None) -> np.ndarray:
    """Gradient of the loss with the teacher estimate held fixed (no teacher Jacobian)."""
    ev = sds_loss(x, teacher, s, schedule, eps=eps, condition=condition)
    return 2.0 * _col(ev.coefficient) * ev.residual


def proximal_update(x0_student, grad, gamma: float, t, s, schedule: NoiseSchedule) -> np.ndarray:
    """One step of size ``gamma`` along ``grad`` rescaled from the ``s`` weight to the ``t`` weight.

    The loss gradient carries ``ab_s / (1 - ab_s)`` while the interpolation
    weight couples to ``sqrt(ab_t) / sqrt(1 - ab_t)``; the rescaling makes the
    step equal the interpolation with ``lam = lambda_from_gamma(gamma, t)``.
    """
    ab_t = _col(schedule.alpha_bar(t))
    ab_s = _col(schedule.alpha_bar(s))
    scale = (np.sqrt(ab_t) / np.sqrt(1.0 - ab_t)) / (ab_s / (1.0 - ab_s))
    return np.asarray(x0_student, dtype=np.float64) - gamma * scale * grad


def teacher_guided_eps(x_t, x_s, eps_student, eps_teacher, lam: float, t, schedule: NoiseSchedule):
    """Guidance-form revision; returns ``(x0_new, x_tilde)``."""
    x_t = np.asarray(x_t, dtype=np.float64)
    x_tilde = (1.0 - lam) * x_t + lam * np.asarray(x_s, dtype=np.float64)
    ab = _col(schedule.alpha_bar(t))
    direction = eps_student + lam * (eps_teacher - eps_student)
    return (x_tilde - np.sqrt(1.0 - ab) * direction) / np.sqrt(ab), x_tilde


def renoise_time(renoise_mode: str, t_eval, t_next, grid: TimeGrid | None = None, rng=None, n: int = 1):
    """Teacher evaluation time; ``random`` draws per row from ``rng`` over the grid's interior times."""
    if renoise_mode == "same":
        s = t_eval
    elif renoise_mode == "decreasing":
        s = t_next
    else:
        if grid is None or rng is None:
            raise GuidanceError("random renoising needs the grid and an rng")
        options = np.array(grid.steps[1:-1], dtype=np.float64)
        options = options[options > 0]
        if options.size == 0:
            options = np.array([t for t in grid.steps if t > 0], dtype=np.float64)
        return rng.choice(options, n)
    if s <= 0:
        # clamp to the smallest positive grid time (or one training step)
        positive = [t for t in (grid.steps if grid is not None else ()) if t > 0]
        s = min(positive) if positive else 1
    return float(s)


def revise_estimate(
    x0_student,
    teacher: Denoiser,
    cfg: GuidanceConfig,
    t,
    schedule: NoiseSchedule,
    rng=None,
    condition=None,
    w: float | None = None,
    *,
    t_next=None,
    grid: TimeGrid | None = None,
    eps=None,
    time_rng=None,
):
    """Interpolate the student estimate toward the teacher's denoising of its renoised copy.

    ``teacher`` is wrapped in CFG at scale ``w`` (default ``cfg.teacher_w``).
    ``lam = 0`` returns the input untouched without calling the teacher.
    """
    x0_student = np.asarray(x0_student, dtype=np.float64)
    lam = cfg.lambda_at(t, schedule)
    if lam == 0:
        return x0_student
    n = x0_student.shape[0] if x0_student.ndim > 1 else 1
    s = renoise_time(cfg.renoise, t, t if t_next is None else t_next, grid, time_rng, n)
    x_s, _ = renoise(x0_student, s, schedule, rng, eps)
    tw = CfgDenoiser(teacher, CfgParams(cfg.teacher_w if w is None else w))
    x0_teacher = tw(x_s, s, condition).x0
    return (1.0 - lam) * x0_student + lam * x0_teacher


class _Reviser:
    """Per-step hook used by :func:`sample`; records what each guided step did."""

    def __init__(self, teacher, cfg, schedule, grid, rng, condition, log):
        self.teacher = teacher
        self.cfg = cfg
        self.schedule = schedule
        self.grid = grid
        self.rng = rng
        self.condition = condition
        self.log = log

    def __call__(self, step, x, x0, eps, t_eval, t_next):
        cfg = self.cfg
        if step >= cfg.k:
            return None
        lam = cfg.lambda_at(t_eval, self.schedule)
        if lam == 0:
            return None
        if cfg.renoise == "decreasing" and t_next <= 0:
            # nothing to renoise to past the clean end
            return None
        n = x.shape[0]
        time_bank = self.rng.bank("renoise-time") if cfg.renoise == "random" else None
        s = renoise_time(cfg.renoise, t_eval, t_next, self.grid, time_bank, n)
        x_s, noise = renoise(x0, s, self.schedule, self.rng.bank("renoise"))
        pred = self.teacher(x_s, s, self.condition)
        if cfg.mode == "interp":
            x0_new = (1.0 - lam) * x0 + lam * pred.x0
        else:
            x0_new, _ = teacher_guided_eps(x, x_s, eps, pred.eps, lam, t_eval, self.schedule)
        self.log.append({"step": step, "t": float(t_eval), "s": np.array(s, dtype=np.float64), "lam": lam, "eps": noise})
        return x0_new


def run_distillation_pp(
    student: Denoiser,
    teacher: Denoiser,
    solver: SolverKind | str,
    grid: TimeGrid,
    schedule: NoiseSchedule,
    cfg: GuidanceConfig,
    cfg_params: CfgParams = CfgParams(),
    rng: TrajectoryRng | None = None,
    *,
    init=None,
    dim: int | None = None,
    condition=None,
    eta: float = 1.0,
    r: float = 0.5,
    solver_mode: str = "cfg",
) -> Trajectory:
    """Sample with ``student`` while the first ``cfg.k`` steps are teacher-guided.

    Both models are CFG-wrapped (student at ``cfg_params``, teacher at
    ``cfg.teacher_w``) and counted; ``traj.calls`` holds the number of
    denoising rounds per model, one per trajectory row per evaluation.
    """
    if cfg.k > grid.m_steps:
        raise GuidanceError(f"k={cfg.k} exceeds the {grid.m_steps} grid steps")
    if rng is None:
        raise GuidanceError("an rng is required")
    s_model = CountingDenoiser(CfgDenoiser(student, cfg_params))
    t_model = CountingDenoiser(CfgDenoiser(teacher, CfgParams(cfg.teacher_w)))
    log: list = []
    reviser = _Reviser(t_model, cfg, schedule, grid, rng, condition, log) if cfg.enabled else None
    first = reviser if (reviser is not None and cfg.revise_uncond) else None
    traj = sample(
        s_model, solver, grid, schedule, init, rng,
        dim=dim, condition=condition, eta=eta, r=r, mode=solver_mode, reviser=reviser, first_reviser=first,
    )
    traj.calls = {"student": s_model.calls, "teacher": t_model.calls}
    traj.guidance = log
    return traj
