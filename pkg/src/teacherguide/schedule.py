"""Discrete variance-preserving noise schedules and the grids samplers walk.

Index convention: ``t = 0`` is the clean end (``alpha_bar = 1``) and
``t = n_train`` is the noisiest training step. Fractional times are allowed
everywhere; ``alpha_bar`` is interpolated linearly in ``log(alpha_bar)``
between integer indices so the VE view and its inverse are exact inverses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

SCHEDULE_KINDS = ("linear", "cosine", "scaled-linear")
SPACINGS = ("uniform", "trailing", "custom")


class ScheduleError(ValueError):
    pass


class DegenerateGridError(ScheduleError):
    pass


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    kind: str
    betas: np.ndarray
    beta_min: float
    beta_max: float
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)
    _log_alpha_bars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        betas = _readonly(self.betas)
        if betas.ndim != 1 or betas.size < 2:
            raise ScheduleError("need at least two betas")
        if not np.all((betas > 0) & (betas < 1)):
            raise ScheduleError("every beta must lie in (0, 1)")
        alphas = 1.0 - betas
        log_ab = np.concatenate([[0.0], np.cumsum(np.log(alphas))])
        # cumprod keeps alpha_bars[t] equal to the literal running product
        ab = np.concatenate([[1.0], np.cumprod(alphas)])
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", _readonly(alphas))
        object.__setattr__(self, "alpha_bars", _readonly(ab))
        object.__setattr__(self, "_log_alpha_bars", _readonly(log_ab))

    @property
    def n_train(self) -> int:
        return self.betas.size

    def __eq__(self, other):
        if not isinstance(other, NoiseSchedule):
            return NotImplemented
        return self.kind == other.kind and np.array_equal(self.betas, other.betas)

    def __hash__(self):
        return hash((self.kind, self.betas.tobytes()))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n_train": self.n_train,
            "beta_min": self.beta_min,
            "beta_max": self.beta_max,
        }

    def _check_time(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0) or np.any(t > self.n_train) or np.any(np.isnan(t)):
            raise ScheduleError(f"time outside [0, {self.n_train}]: {t}")
        return t

    def alpha_bar(self, t) -> np.ndarray | float:
        """Cumulative signal level at (possibly fractional) time ``t``."""
        t = self._check_time(t)
        lo = np.floor(t).astype(np.int64)
        integral = t == lo
        if np.all(integral):
            out = self.alpha_bars[lo]
        else:
            hi = np.minimum(lo + 1, self.n_train)
            frac = t - lo
            log_ab = (1 - frac) * self._log_alpha_bars[lo] + frac * self._log_alpha_bars[hi]
            out = np.where(integral, self.alpha_bars[lo], np.exp(log_ab))
        return float(out) if np.ndim(out) == 0 else out

    def sigma(self, t) -> np.ndarray | float:
        """VE noise level ``sqrt((1 - alpha_bar) / alpha_bar)``."""
        ab = np.asarray(self.alpha_bar(t))
        out = np.sqrt((1.0 - ab) / ab)
        return float(out) if np.ndim(out) == 0 else out

    def time_of_alpha_bar(self, alpha_bar) -> np.ndarray | float:
        """Inverse of :meth:`alpha_bar` on ``[alpha_bars[-1], 1]``."""
        log_ab = np.log(np.asarray(alpha_bar, dtype=np.float64))
        lo, hi = self._log_alpha_bars[-1], 0.0
        if np.any(log_ab < lo - 1e-12) or np.any(log_ab > hi + 1e-12):
            raise ScheduleError("alpha_bar outside the schedule range")
        # np.interp needs increasing abscissae; log alpha_bar decreases in t
        grid_t = np.arange(self.n_train + 1, dtype=np.float64)
        out = np.interp(log_ab, self._log_alpha_bars[::-1], grid_t[::-1])
        return float(out) if np.ndim(out) == 0 else out

    def time_of_sigma(self, sigma) -> np.ndarray | float:
        sigma = np.asarray(sigma, dtype=np.float64)
        return self.time_of_alpha_bar(1.0 / (1.0 + sigma**2))


def _cosine_betas(n: int, offset: float = 0.008) -> np.ndarray:
    steps = np.arange(n + 1, dtype=np.float64) / n
    f = np.cos((steps + offset) / (1 + offset) * math.pi / 2) ** 2
    ab = f / f[0]
    return 1.0 - ab[1:] / ab[:-1]


def build_schedule(
    kind: str = "linear",
    n_train: int = 1000,
    beta_min: float = 1e-4,
    beta_max: float = 2e-2,
) -> NoiseSchedule:
    """Build a discrete VP schedule.

    ``linear`` spaces betas evenly, ``scaled-linear`` spaces their square
    roots evenly, and ``cosine`` uses the squared-cosine ``alpha_bar`` curve
    with betas clipped into ``[beta_min, beta_max]`` (pass ``beta_max`` close
    to 1 to keep the pure cosine shape).
    """
    if kind not in SCHEDULE_KINDS:
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    if int(n_train) != n_train or n_train < 2:
        raise ScheduleError("n_train must be an integer >= 2")
    if not (0 < beta_min <= beta_max < 1):
        raise ScheduleError("need 0 < beta_min <= beta_max < 1")
    n_train = int(n_train)
    if kind == "linear":
        betas = np.linspace(beta_min, beta_max, n_train)
    elif kind == "scaled-linear":
        betas = np.linspace(beta_min**0.5, beta_max**0.5, n_train) ** 2
    else:
        betas = np.clip(_cosine_betas(n_train), beta_min, beta_max)
    return NoiseSchedule(kind=kind, betas=betas, beta_min=float(beta_min), beta_max=float(beta_max))


@dataclass(frozen=True)
class TimeGrid:
    steps: tuple[int, ...]
    spacing: str = "custom"

    def __post_init__(self):
        steps = tuple(int(s) for s in self.steps)
        if len(steps) < 2:
            raise ScheduleError("a grid needs at least two entries")
        if any(b >= a for a, b in zip(steps, steps[1:])):
            raise ScheduleError(f"grid must be strictly descending: {steps}")
        if steps[-1] < 0:
            raise ScheduleError("grid times must be non-negative")
        if self.spacing not in SPACINGS:
            raise ScheduleError(f"unknown spacing {self.spacing!r}")
        object.__setattr__(self, "steps", steps)

    def __len__(self):
        return len(self.steps)

    @property
    def m_steps(self) -> int:
        return len(self.steps) - 1

    def intervals(self):
        return list(zip(self.steps[:-1], self.steps[1:]))


def make_grid(schedule: NoiseSchedule, m_steps: int, spacing: str = "uniform") -> TimeGrid:
    """Descending integer grid of ``m_steps + 1`` times from ``n_train`` to 0.

    ``uniform`` rounds an even split of ``[0, n_train]``; ``trailing`` anchors
    at ``n_train`` and floors each stride offset, so the noisy end is hit
    exactly and rounding slack lands on the clean side.
    """
    n = schedule.n_train
    if int(m_steps) != m_steps or not (1 <= m_steps <= n):
        raise ScheduleError(f"m_steps must be in [1, {n}]")
    m_steps = int(m_steps)
    if spacing == "uniform":
        steps = np.floor(np.linspace(n, 0, m_steps + 1) + 0.5).astype(int)
    elif spacing == "trailing":
        offsets = (np.arange(m_steps) * n) // m_steps
        steps = np.concatenate([n - offsets, [0]])
    else:
        raise ScheduleError(f"make_grid supports uniform/trailing, got {spacing!r}")
    return TimeGrid(tuple(int(s) for s in steps), spacing)


def custom_grid(steps: Sequence[int], schedule: NoiseSchedule | None = None) -> TimeGrid:
    grid = TimeGrid(tuple(steps), "custom")
    if schedule is not None and grid.steps[0] > schedule.n_train:
        raise ScheduleError("grid starts beyond the schedule")
    return grid


@dataclass(frozen=True, eq=False)
class VeView:
    """Log-sigma view of a grid, with ``sigma = exp(-lam)``.

    ``h[i]``, ``r[i]``, ``s_lam[i]`` and ``s_times[i]`` describe the interval
    from ``times[i]`` to ``times[i + 1]``. An interval ending at the clean end
    (``sigma = 0``) has ``h = inf`` and no intermediate point; solvers treat it
    as a plain jump to the denoised estimate.
    """

    times: np.ndarray
    sigmas: np.ndarray
    lam: np.ndarray
    h: np.ndarray
    r: np.ndarray
    s_lam: np.ndarray
    s_times: np.ndarray

    @property
    def terminal(self) -> np.ndarray:
        return np.isinf(self.h)


def dpm_quantities(
    grid: TimeGrid | Sequence[float],
    schedule: NoiseSchedule,
    r_choice: float | Sequence[float] = 0.5,
) -> VeView:
    times = np.asarray(grid.steps if isinstance(grid, TimeGrid) else grid, dtype=np.float64)
    if times.ndim != 1 or times.size < 2:
        raise ScheduleError("need at least two grid times")
    m = times.size - 1
    r = np.broadcast_to(np.asarray(r_choice, dtype=np.float64), (m,)).copy()
    if np.any((r <= 0) | (r >= 1)):
        raise ScheduleError("every r must lie strictly inside (0, 1)")
    sigmas = np.asarray(schedule.sigma(times), dtype=np.float64)
    with np.errstate(divide="ignore"):
        lam = -np.log(sigmas)
    h = np.diff(lam)
    if np.any(~(h > 0)):
        bad = int(np.flatnonzero(~(h > 0))[0])
        raise DegenerateGridError(f"non-positive log-sigma step on interval {bad}: h={h[bad]}")
    terminal = np.isinf(h)
    r[terminal] = np.nan
    s_lam = np.where(terminal, np.nan, lam[:-1] + r * np.where(terminal, 0.0, h))
    s_times = np.full(m, np.nan)
    live = ~terminal
    if np.any(live):
        s_times[live] = schedule.time_of_sigma(np.exp(-s_lam[live]))
    return VeView(
        times=_readonly(times),
        sigmas=_readonly(sigmas),
        lam=_readonly(lam),
        h=_readonly(h),
        r=_readonly(r),
        s_lam=_readonly(s_lam),
        s_times=_readonly(s_times),
    )
