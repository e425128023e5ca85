"""Sampling iterates over any :class:`~teacherguide.world.Denoiser`.

State is always kept in VP coordinates. Solvers that are naturally written in
VE coordinates (Euler, Euler ancestral, DPM-Solver++) convert with
``x_ve = x / sqrt(alpha_bar)`` on entry and back on exit; their log-sigma time
is ``lam = -log(sigma)``.

Each step accepts an optional ``revise`` callback
``revise(x, x0, eps, t_eval, t_next) -> x0_new | None``. It replaces the
denoised anchor of the update (the teacher-guided estimate) while the
direction terms keep the model's own prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, NamedTuple

import numpy as np

from .schedule import NoiseSchedule, TimeGrid
from .world import Denoiser, Prediction


class SolverError(ValueError):
    pass


class SolverKind(str, Enum):
    DDIM = "ddim"
    EULER_VE = "euler_ve"
    EULER_ANCESTRAL = "euler_ancestral"
    DPMPP_2S = "dpmpp_2s"
    DPMPP_2S_ANCESTRAL = "dpmpp_2s_ancestral"
    DPMPP_2M = "dpmpp_2m"
    DPMPP_2M_ANCESTRAL = "dpmpp_2m_ancestral"

    @property
    def ancestral(self) -> bool:
        return self.value.endswith("ancestral")


Reviser = Callable[[np.ndarray, np.ndarray, np.ndarray, float, float], "np.ndarray | None"]


class StepOutput(NamedTuple):
    x_next: np.ndarray
    x0: np.ndarray
    eps: np.ndarray
    noise: np.ndarray | None = None
    history: tuple | None = None


def _apply(revise, x, pred: Prediction, t_eval, t_next) -> np.ndarray:
    if revise is None:
        return pred.x0
    out = revise(x, pred.x0, pred.eps, t_eval, t_next)
    return pred.x0 if out is None else out


def _check_order(t_cur, t_next):
    if t_next > t_cur:
        raise SolverError(f"grid-order violation: t_next={t_next} > t_cur={t_cur}")


def ancestral_split(sigma_from: float, sigma_to: float, eta: float = 1.0) -> tuple[float, float]:
    """Split a step into ``(sigma_down, sigma_up)`` with ``down**2 + up**2 == to**2``."""
    if eta == 0 or sigma_to == 0:
        return sigma_to, 0.0
    up = min(sigma_to, eta * math.sqrt(sigma_to**2 * (sigma_from**2 - sigma_to**2) / sigma_from**2))
    down = math.sqrt(max(sigma_to**2 - up**2, 0.0))
    return down, up


def _draw(rng, shape):
    if rng is None:
        raise SolverError("ancestral step needs an rng stream")
    return rng.standard_normal(shape)


def ddim_step(denoiser: Denoiser, x, t_cur, t_next, schedule: NoiseSchedule, condition=None, revise=None) -> StepOutput:
    _check_order(t_cur, t_next)
    pred = denoiser(x, t_cur, condition)
    anchor = _apply(revise, x, pred, t_cur, t_next)
    ab = schedule.alpha_bar(t_next)
    x_next = math.sqrt(ab) * anchor + math.sqrt(1.0 - ab) * pred.eps
    return StepOutput(x_next, anchor, pred.eps)


def euler_ve_step(denoiser: Denoiser, x, t_cur, t_next, schedule: NoiseSchedule, condition=None, revise=None) -> StepOutput:
    _check_order(t_cur, t_next)
    x = np.asarray(x, dtype=np.float64)
    if t_next == t_cur:
        pred = denoiser(x, t_cur, condition)
        return StepOutput(x.copy(), pred.x0, pred.eps)
    pred = denoiser(x, t_cur, condition)
    anchor = _apply(revise, x, pred, t_cur, t_next)
    ab_c, ab_n = schedule.alpha_bar(t_cur), schedule.alpha_bar(t_next)
    s_c, s_n = schedule.sigma(t_cur), schedule.sigma(t_next)
    x_ve = x / math.sqrt(ab_c)
    d = (x_ve - pred.x0) / s_c
    x_next = math.sqrt(ab_n) * (anchor + d * s_n)
    return StepOutput(x_next, anchor, pred.eps)


def euler_ancestral_step(
    denoiser: Denoiser,
    x,
    t_cur,
    t_next,
    schedule: NoiseSchedule,
    rng=None,
    *,
    t_down=None,
    eta: float = 1.0,
    noise=None,
    condition=None,
    revise=None,
) -> StepOutput:
    """Euler step to ``sigma_down`` plus fresh noise of scale ``sigma_up``.

    ``eta = 0`` removes the noise and recovers :func:`euler_ve_step`.
    """
    _check_order(t_cur, t_next)
    x = np.asarray(x, dtype=np.float64)
    s_c, s_n = schedule.sigma(t_cur), schedule.sigma(t_next)
    if t_down is not None:
        s_down = schedule.sigma(t_down)
        if not (s_n >= s_down):
            raise SolverError("need t_cur >= t_down >= t_next ordering with sigma_down <= sigma_next")
        s_up = math.sqrt(s_n**2 - s_down**2)
    else:
        s_down, s_up = ancestral_split(s_c, s_n, eta)
    pred = denoiser(x, t_cur, condition)
    anchor = _apply(revise, x, pred, t_cur, t_next)
    x_ve = x / math.sqrt(schedule.alpha_bar(t_cur))
    d = (x_ve - pred.x0) / s_c
    x_ve_next = anchor + d * s_down
    if s_up > 0:
        noise = _draw(rng, x.shape) if noise is None else noise
        x_ve_next = x_ve_next + s_up * noise
    else:
        noise = None
    x_next = math.sqrt(schedule.alpha_bar(t_next)) * x_ve_next
    return StepOutput(x_next, anchor, pred.eps, noise)


def _2s_ve(x_ve, first, at_u, h, r):
    e = math.exp(-h)
    return first - e * first + (1.0 - e) / (2.0 * r) * (at_u - first) + e * x_ve


def _dpmpp_2s_core(denoiser, x, t_prev, sigma_target, schedule, r, condition, mode, revise, revise_first, t_next):
    if mode not in ("cfg", "cfgpp"):
        raise SolverError(f"unknown CFG mode {mode!r}")
    if not (0 < r <= 1):
        raise SolverError("r must lie in (0, 1]")
    x = np.asarray(x, dtype=np.float64)
    ab_p = schedule.alpha_bar(t_prev)
    s_p = schedule.sigma(t_prev)
    x_ve = x / math.sqrt(ab_p)
    if sigma_target == 0:
        pred = denoiser(x, t_prev, condition)
        anchor = _apply(revise, x, pred, t_prev, t_next)
        return anchor, anchor, pred.eps
    if not (sigma_target < s_p):
        raise SolverError(f"degenerate interval: sigma {s_p} -> {sigma_target}")
    h = math.log(s_p / sigma_target)
    first_cond = None if (mode == "cfgpp") else condition
    pred0 = denoiser(x, t_prev, first_cond)
    first = pred0.x0 if revise_first is None else _apply(revise_first, x, pred0, t_prev, t_next)
    sigma_s = s_p * math.exp(-r * h)
    t_s = float(schedule.time_of_sigma(sigma_s))
    u_ve = math.exp(-r * h) * x_ve + (1.0 - math.exp(-r * h)) * first
    u = math.sqrt(schedule.alpha_bar(t_s)) * u_ve
    pred_u = denoiser(u, t_s, condition)
    at_u = _apply(revise, u, pred_u, t_s, t_next)
    return _2s_ve(x_ve, first, at_u, h, r), at_u, pred0.eps


def dpmpp_2s_step(
    denoiser: Denoiser,
    x,
    t_prev,
    t_next,
    schedule: NoiseSchedule,
    r: float = 0.5,
    *,
    condition=None,
    mode: str = "cfg",
    revise=None,
    revise_first=None,
) -> StepOutput:
    """Single-step second-order DPM-Solver++ with an intermediate log-sigma point.

    ``mode="cfgpp"`` builds the intermediate state and the renoising terms from
    the null-condition estimate while the correction uses the conditional one;
    ``mode="cfg"`` uses the guided estimate everywhere. The interval ending at
    the clean end collapses to the denoised estimate.
    """
    _check_order(t_prev, t_next)
    x_ve_next, at_u, eps = _dpmpp_2s_core(
        denoiser, x, t_prev, schedule.sigma(t_next), schedule, r, condition, mode, revise, revise_first, t_next
    )
    return StepOutput(math.sqrt(schedule.alpha_bar(t_next)) * x_ve_next, at_u, eps)


def dpmpp_2s_ancestral_step(
    denoiser: Denoiser,
    x,
    t_prev,
    t_next,
    schedule: NoiseSchedule,
    rng=None,
    r: float = 0.5,
    *,
    eta: float = 1.0,
    noise=None,
    condition=None,
    mode: str = "cfg",
    revise=None,
    revise_first=None,
) -> StepOutput:
    _check_order(t_prev, t_next)
    s_down, s_up = ancestral_split(schedule.sigma(t_prev), schedule.sigma(t_next), eta)
    x_ve_next, at_u, eps = _dpmpp_2s_core(denoiser, x, t_prev, s_down, schedule, r, condition, mode, revise, revise_first, t_next)
    if s_up > 0:
        noise = _draw(rng, np.shape(x)) if noise is None else noise
        x_ve_next = x_ve_next + s_up * noise
    else:
        noise = None
    return StepOutput(math.sqrt(schedule.alpha_bar(t_next)) * x_ve_next, at_u, eps, noise)


def dpmpp_2m_combine(x_ve, x0, x0_prev, h, r, anchor=None, form: str = "rearranged"):
    """Second-order multistep update in VE coordinates.

    ``form="d"`` evaluates the corrected estimate ``D`` first and then the
    exponential update; ``form="rearranged"`` is the expanded equivalent in
    which ``anchor`` (default ``x0``) can replace the leading estimate.
    """
    e = math.exp(-h)
    if form == "d":
        d = x0 + (x0 - x0_prev) / (2.0 * r)
        return e * x_ve - (e - 1.0) * d
    anchor = x0 if anchor is None else anchor
    return anchor - e * x0 + (1.0 - e) / (2.0 * r) * (x0 - x0_prev) + e * x_ve


def _dpmpp_2m_core(denoiser, x, t_prev, sigma_target, schedule, history, first, condition, revise, t_next):
    if history is None and not first:
        raise SolverError("multistep correction needs the previous denoised estimate")
    x = np.asarray(x, dtype=np.float64)
    s_p = schedule.sigma(t_prev)
    x_ve = x / math.sqrt(schedule.alpha_bar(t_prev))
    pred = denoiser(x, t_prev, condition)
    anchor = _apply(revise, x, pred, t_prev, t_next)
    if sigma_target == 0:
        return anchor, anchor, pred.eps, None
    if not (sigma_target < s_p):
        raise SolverError(f"degenerate interval: sigma {s_p} -> {sigma_target}")
    h = math.log(s_p / sigma_target)
    if history is None:
        x_ve_next = anchor + math.exp(-h) * (x_ve - pred.x0)
    else:
        x0_prev, h_prev = history
        x_ve_next = dpmpp_2m_combine(x_ve, pred.x0, x0_prev, h, h_prev / h, anchor=anchor)
    return x_ve_next, anchor, pred.eps, (pred.x0, h)


def dpmpp_2m_step(
    denoiser: Denoiser,
    x,
    t_prev,
    t_next,
    schedule: NoiseSchedule,
    history: tuple | None = None,
    *,
    first: bool = False,
    condition=None,
    revise=None,
) -> StepOutput:
    """Multistep second-order DPM-Solver++.

    ``history`` is ``(previous model estimate, previous log-sigma step)``; the
    returned :attr:`StepOutput.history` feeds the next call. With ``first=True``
    and no history the first-order opening iterate is used. The history always
    carries the model's own estimate, never the revised anchor.
    """
    _check_order(t_prev, t_next)
    x_ve_next, anchor, eps, hist = _dpmpp_2m_core(
        denoiser, x, t_prev, schedule.sigma(t_next), schedule, history, first, condition, revise, t_next
    )
    return StepOutput(math.sqrt(schedule.alpha_bar(t_next)) * x_ve_next, anchor, eps, None, hist)


def dpmpp_2m_ancestral_step(
    denoiser: Denoiser,
    x,
    t_prev,
    t_next,
    schedule: NoiseSchedule,
    rng=None,
    history: tuple | None = None,
    *,
    first: bool = False,
    eta: float = 1.0,
    noise=None,
    condition=None,
    revise=None,
) -> StepOutput:
    _check_order(t_prev, t_next)
    s_down, s_up = ancestral_split(schedule.sigma(t_prev), schedule.sigma(t_next), eta)
    x_ve_next, anchor, eps, hist = _dpmpp_2m_core(
        denoiser, x, t_prev, s_down, schedule, history, first, condition, revise, t_next
    )
    if s_up > 0:
        noise = _draw(rng, np.shape(x)) if noise is None else noise
        x_ve_next = x_ve_next + s_up * noise
    else:
        noise = None
    return StepOutput(math.sqrt(schedule.alpha_bar(t_next)) * x_ve_next, anchor, eps, noise, hist)


@dataclass
class Record:
    t: float
    x: np.ndarray
    x0: np.ndarray | None
    eps: np.ndarray | None
    noise: np.ndarray | None = None


@dataclass
class Trajectory:
    """One batch of sampling runs; row ``i`` is trajectory ``stream_ids[i]``."""

    seed: int | None
    stream_ids: np.ndarray
    solver: str
    grid: TimeGrid
    records: list[Record] = field(default_factory=list)
    calls: dict = field(default_factory=dict)
    guidance: list = field(default_factory=list)

    @property
    def final(self) -> np.ndarray:
        return self.records[-1].x

    @property
    def init(self) -> np.ndarray:
        return self.records[0].x

    def __len__(self):
        return len(self.records)


def initial_noise(rng, n: int, dim: int) -> np.ndarray:
    bank = rng.bank("init") if hasattr(rng, "bank") else rng
    return bank.standard_normal((n, dim))


def sample(
    denoiser: Denoiser,
    solver: SolverKind | str,
    grid: TimeGrid,
    schedule: NoiseSchedule,
    init=None,
    rng=None,
    *,
    dim: int | None = None,
    condition=None,
    eta: float = 1.0,
    r: float = 0.5,
    mode: str = "cfg",
    reviser=None,
    first_reviser=None,
) -> Trajectory:
    """Integrate from ``grid.steps[0]`` to ``grid.steps[-1]``.

    ``rng`` is a :class:`~teacherguide.rng.TrajectoryRng`; its ``init`` bank
    draws ``x_T`` when ``init`` is omitted and its ``ancestral`` bank feeds the
    stochastic solvers. ``reviser(step, x, x0, eps, t_eval, t_next)`` may
    replace the denoised anchor at any step.
    """
    solver = SolverKind(solver)
    if grid.steps[0] > schedule.n_train:
        raise SolverError("grid starts beyond the schedule")
    if init is None:
        if rng is None or dim is None:
            raise SolverError("need init or (rng, dim)")
        init = initial_noise(rng, len(rng), dim)
    x = np.array(init, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    ancestral_rng = rng.bank("ancestral") if (solver.ancestral and rng is not None) else None
    if solver.ancestral and ancestral_rng is None:
        raise SolverError(f"{solver.value} needs an rng stream")

    traj = Trajectory(
        seed=None if rng is None else rng.seed,
        stream_ids=np.arange(x.shape[0]) if rng is None else rng.indices,
        solver=solver.value,
        grid=grid,
    )
    history = None
    for i, (t_cur, t_next) in enumerate(grid.intervals()):
        revise = None if reviser is None else _bind(reviser, i)
        revise_first = None if first_reviser is None else _bind(first_reviser, i)
        if solver is SolverKind.DDIM:
            out = ddim_step(denoiser, x, t_cur, t_next, schedule, condition, revise)
        elif solver is SolverKind.EULER_VE:
            out = euler_ve_step(denoiser, x, t_cur, t_next, schedule, condition, revise)
        elif solver is SolverKind.EULER_ANCESTRAL:
            out = euler_ancestral_step(
                denoiser, x, t_cur, t_next, schedule, ancestral_rng, eta=eta, condition=condition, revise=revise
            )
        elif solver is SolverKind.DPMPP_2S:
            out = dpmpp_2s_step(
                denoiser, x, t_cur, t_next, schedule, r, condition=condition, mode=mode, revise=revise, revise_first=revise_first
            )
        elif solver is SolverKind.DPMPP_2S_ANCESTRAL:
            out = dpmpp_2s_ancestral_step(
                denoiser, x, t_cur, t_next, schedule, ancestral_rng, r,
                eta=eta, condition=condition, mode=mode, revise=revise, revise_first=revise_first,
            )
        elif solver is SolverKind.DPMPP_2M:
            out = dpmpp_2m_step(
                denoiser, x, t_cur, t_next, schedule, history, first=(i == 0), condition=condition, revise=revise
            )
            history = out.history
        else:
            out = dpmpp_2m_ancestral_step(
                denoiser, x, t_cur, t_next, schedule, ancestral_rng, history,
                first=(i == 0), eta=eta, condition=condition, revise=revise,
            )
            history = out.history
        traj.records.append(Record(float(t_cur), x, out.x0, out.eps, out.noise))
        x = out.x_next
    traj.records.append(Record(float(grid.steps[-1]), x, None, None))
    return traj


def _bind(reviser, step):
    def revise(x, x0, eps, t_eval, t_next):
        return reviser(step, x, x0, eps, t_eval, t_next)

    return revise


def replay_first_order(traj: Trajectory, schedule: NoiseSchedule) -> float:
    """Max deviation when re-applying ``x' = sqrt(ab') x0 + sqrt(1 - ab') eps`` record by record.

    Valid for DDIM and Euler trajectories, guided or not, because both reduce
    to this update in VP coordinates.
    """
    worst = 0.0
    for rec, nxt in zip(traj.records[:-1], traj.records[1:]):
        ab = schedule.alpha_bar(nxt.t)
        again = math.sqrt(ab) * rec.x0 + math.sqrt(1.0 - ab) * rec.eps
        worst = max(worst, float(np.max(np.abs(again - nxt.x))))
    return worst


def replay(traj: Trajectory, denoiser: Denoiser, schedule: NoiseSchedule, *, condition=None, eta=1.0, r=0.5, mode="cfg") -> float:
    """Max deviation when re-running each recorded step from its recorded state.

    Stochastic steps reuse the recorded noise; unguided trajectories only.
    """
    solver = SolverKind(traj.solver)
    worst = 0.0
    history = None
    for i, (rec, nxt) in enumerate(zip(traj.records[:-1], traj.records[1:])):
        t_cur, t_next = rec.t, nxt.t
        if solver is SolverKind.DDIM:
            out = ddim_step(denoiser, rec.x, t_cur, t_next, schedule, condition)
        elif solver is SolverKind.EULER_VE:
            out = euler_ve_step(denoiser, rec.x, t_cur, t_next, schedule, condition)
        elif solver is SolverKind.EULER_ANCESTRAL:
            out = euler_ancestral_step(denoiser, rec.x, t_cur, t_next, schedule, None, eta=eta, noise=rec.noise, condition=condition)
        elif solver is SolverKind.DPMPP_2S:
            out = dpmpp_2s_step(denoiser, rec.x, t_cur, t_next, schedule, r, condition=condition, mode=mode)
        elif solver is SolverKind.DPMPP_2S_ANCESTRAL:
            out = dpmpp_2s_ancestral_step(
                denoiser, rec.x, t_cur, t_next, schedule, None, r, eta=eta, noise=rec.noise, condition=condition, mode=mode
            )
        elif solver is SolverKind.DPMPP_2M:
            out = dpmpp_2m_step(denoiser, rec.x, t_cur, t_next, schedule, history, first=(i == 0), condition=condition)
            history = out.history
        else:
            out = dpmpp_2m_ancestral_step(
                denoiser, rec.x, t_cur, t_next, schedule, None, history, first=(i == 0), eta=eta, noise=rec.noise, condition=condition
            )
            history = out.history
        worst = max(worst, float(np.max(np.abs(out.x_next - nxt.x))))
    return worst
