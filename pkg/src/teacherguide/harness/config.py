"""Experiment configuration: a YAML tree validated into frozen dataclasses.

Every section is optional except ``world`` and ``student``. Unknown keys are
rejected at every level with their dotted path. Example::

    world:
      components:
        - {weight: 0.5, mean: [-1.5, 0.5], var: [0.25, 0.5]}
        - {weight: 0.5, mean: [1.5, -0.5], var: [0.25, 0.5]}
    student: {kind: biased-mean, params: {shift: 0.25}}
    schedule: {kind: linear, n_train: 1000, beta_min: 1.0e-4, beta_max: 0.02}
    grid: {m_steps: 4, spacing: uniform}
    solver: {kind: ddim}
    guidance: {lambda: 0.02, k: 1, renoise: decreasing, mode: interp, teacher_w: 7.5}
    cfg: {w: 1.0}
    n_samples: 10000
    seed: 0
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import yaml

from ..guidance import GuidanceConfig, GuidanceError
from ..schedule import SCHEDULE_KINDS, ScheduleError, TimeGrid, build_schedule, make_grid
from ..solvers import SolverKind
from ..world import CfgParams, MixtureWorld, StudentSpec, WorldError, make_student

TOP_KEYS = {
    "world", "student", "schedule", "grid", "solver", "guidance", "cfg", "condition",
    "n_samples", "seed", "output", "reference", "metrics", "sweep", "convergence",
}


class ConfigError(ValueError):
    """Raised for malformed or invalid configuration; message names the offending key."""


def _check_keys(section: dict, allowed: set, path: str):
    if not isinstance(section, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(section).__name__}")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {', '.join(unknown)}")


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "linear"
    n_train: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 2e-2

    def build(self):
        return build_schedule(self.kind, self.n_train, self.beta_min, self.beta_max)


@dataclass(frozen=True)
class GridSpec:
    m_steps: int = 4
    spacing: str = "uniform"


@dataclass(frozen=True)
class SolverSpec:
    kind: str = "ddim"
    eta: float = 1.0
    r: float = 0.5
    mode: str = "cfg"


REFERENCE_STEPS = 1024


@dataclass(frozen=True)
class ReferenceSpec:
    """``m_steps = None`` means ``min(1024, n_train)``."""

    m_steps: int | None = None
    n_samples: int | None = None


@dataclass(frozen=True)
class MetricsSpec:
    n_projections: int = 128
    mmd_points: int = 2000


@dataclass(frozen=True)
class SweepSpec:
    lambdas: tuple[float, ...] = (0.0, 0.02, 0.05, 0.1, 0.2)
    bootstrap: int = 50


@dataclass(frozen=True)
class ConvergenceSpec:
    solvers: tuple[str, ...] = ("ddim", "euler_ve", "dpmpp_2s", "dpmpp_2m")
    m_steps: tuple[int, ...] = (8, 16, 32, 64)
    n_reference: int = 4096
    n_samples: int = 64


@dataclass(frozen=True)
class OutputSpec:
    path: str = "out"
    trajectories: int = 16


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    world: MixtureWorld
    student: StudentSpec
    schedule: ScheduleSpec = ScheduleSpec()
    grid: GridSpec = GridSpec()
    solver: SolverSpec = SolverSpec()
    guidance: GuidanceConfig = GuidanceConfig()
    cfg: CfgParams = CfgParams()
    condition: str | None = None
    n_samples: int = 1000
    seed: int = 0
    output: OutputSpec = OutputSpec()
    reference: ReferenceSpec = ReferenceSpec()
    metrics: MetricsSpec = MetricsSpec()
    sweep: SweepSpec = SweepSpec()
    convergence: ConvergenceSpec = ConvergenceSpec()
    _schedule_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def build_schedule(self):
        if "s" not in self._schedule_cache:
            self._schedule_cache["s"] = self.schedule.build()
        return self._schedule_cache["s"]

    def build_grid(self, m_steps: int | None = None) -> TimeGrid:
        return make_grid(self.build_schedule(), self.grid.m_steps if m_steps is None else m_steps, self.grid.spacing)

    @property
    def reference_steps(self) -> int:
        if self.reference.m_steps is not None:
            return self.reference.m_steps
        return min(REFERENCE_STEPS, self.schedule.n_train)

    def to_dict(self) -> dict:
        return {
            "world": self.world.to_dict(),
            "student": self.student.to_dict(),
            "schedule": _plain(self.schedule),
            "grid": _plain(self.grid),
            "solver": _plain(self.solver),
            "guidance": self.guidance.to_dict(),
            "cfg": {"w": self.cfg.w},
            "condition": self.condition,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "output": _plain(self.output),
            "reference": _plain(self.reference),
            "metrics": _plain(self.metrics),
            "sweep": _plain(self.sweep),
            "convergence": _plain(self.convergence),
        }

    def __eq__(self, other):
        if not isinstance(other, ExperimentConfig):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(self.config_hash)

    @property
    def config_hash(self) -> str:
        """Hash of everything that determines results (the output location is excluded)."""
        d = self.to_dict()
        d.pop("output")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> ExperimentConfig:
        return replace(self, seed=_seed(seed, "seed"), _schedule_cache={})

    def with_guidance(self, **changes) -> ExperimentConfig:
        return replace(self, guidance=replace(self.guidance, **changes), _schedule_cache={})


def _plain(obj) -> dict:
    out = {}
    for k, v in obj.__dict__.items():
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


def _int(value, path, minimum=None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{path}: must be >= {minimum}, got {value}")
    return value


def _float(value, path) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    return float(value)


def _seed(value, path) -> int:
    value = _int(value, path, 0)
    if value >= 2**64:
        raise ConfigError(f"{path}: seed must fit in 64 bits")
    return value


def _section(raw: dict, name: str, cls, fields: dict):
    data = raw.get(name) or {}
    _check_keys(data, set(fields), name)
    kwargs = {}
    for key, conv in fields.items():
        if key in data:
            kwargs[key] = conv(data[key], f"{name}.{key}")
    return cls(**kwargs)


def _str(value, path) -> str:
    if not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string, got {value!r}")
    return value


def _floats(value, path) -> tuple[float, ...]:
    if not isinstance(value, (list, tuple)) or not value:
        raise ConfigError(f"{path}: expected a non-empty list")
    return tuple(_float(v, f"{path}[{i}]") for i, v in enumerate(value))


def _ints(value, path) -> tuple[int, ...]:
    if not isinstance(value, (list, tuple)) or not value:
        raise ConfigError(f"{path}: expected a non-empty list")
    return tuple(_int(v, f"{path}[{i}]", 1) for i, v in enumerate(value))


def _strs(value, path) -> tuple[str, ...]:
    if not isinstance(value, (list, tuple)) or not value:
        raise ConfigError(f"{path}: expected a non-empty list")
    return tuple(_str(v, f"{path}[{i}]") for i, v in enumerate(value))


def _world(raw) -> MixtureWorld:
    if "world" not in raw:
        raise ConfigError("world: required section missing")
    data = raw["world"]
    _check_keys(data, {"components"}, "world")
    comps = data.get("components")
    if not isinstance(comps, list) or not comps:
        raise ConfigError("world.components: expected a non-empty list")
    for i, c in enumerate(comps):
        _check_keys(c, {"weight", "mean", "var", "condition"}, f"world.components[{i}]")
        for key in ("weight", "mean", "var"):
            if key not in c:
                raise ConfigError(f"world.components[{i}].{key}: required")
    try:
        return MixtureWorld.from_dict(data)
    except (WorldError, TypeError, ValueError) as exc:
        raise ConfigError(f"world: {exc}") from exc


def _student(raw, world: MixtureWorld) -> StudentSpec:
    if "student" not in raw:
        raise ConfigError("student: required section missing")
    data = raw["student"]
    _check_keys(data, {"kind", "params"}, "student")
    if "kind" not in data:
        raise ConfigError("student.kind: required")
    try:
        spec = StudentSpec.from_dict(data)
        make_student(spec, world, build_schedule("linear", 2, 0.1, 0.1))
    except (WorldError, TypeError, ValueError) as exc:
        raise ConfigError(f"student: {exc}") from exc
    return spec


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("top level: expected a mapping")
    _check_keys(raw, TOP_KEYS, "top level")
    world = _world(raw)
    student = _student(raw, world)
    schedule = _section(raw, "schedule", ScheduleSpec, {"kind": _str, "n_train": _int, "beta_min": _float, "beta_max": _float})
    if schedule.kind not in SCHEDULE_KINDS:
        raise ConfigError(f"schedule.kind: must be one of {SCHEDULE_KINDS}")
    try:
        sched = schedule.build()
    except ScheduleError as exc:
        raise ConfigError(f"schedule: {exc}") from exc
    grid = _section(raw, "grid", GridSpec, {"m_steps": _int, "spacing": _str})
    try:
        make_grid(sched, grid.m_steps, grid.spacing)
    except ScheduleError as exc:
        raise ConfigError(f"grid: {exc}") from exc
    solver = _section(raw, "solver", SolverSpec, {"kind": _str, "eta": _float, "r": _float, "mode": _str})
    try:
        SolverKind(solver.kind)
    except ValueError as exc:
        raise ConfigError(f"solver.kind: unknown solver {solver.kind!r}") from exc
    if solver.mode not in ("cfg", "cfgpp"):
        raise ConfigError("solver.mode: must be cfg or cfgpp")
    if not (0 < solver.r <= 1):
        raise ConfigError("solver.r: must lie in (0, 1]")
    if solver.eta < 0:
        raise ConfigError("solver.eta: must be non-negative")
    gdata = raw.get("guidance") or {}
    try:
        guidance = GuidanceConfig.from_dict(gdata)
    except (GuidanceError, TypeError) as exc:
        raise ConfigError(f"guidance: {exc}") from exc
    if guidance.k > grid.m_steps:
        raise ConfigError(f"guidance.k: {guidance.k} exceeds grid.m_steps {grid.m_steps}")
    cdata = raw.get("cfg") or {}
    _check_keys(cdata, {"w"}, "cfg")
    try:
        cfg = CfgParams(_float(cdata.get("w", 1.0), "cfg.w"))
    except WorldError as exc:
        raise ConfigError(f"cfg.w: {exc}") from exc
    condition = raw.get("condition")
    if condition is not None:
        if condition not in world.conditions:
            raise ConfigError(f"condition: unknown label {condition!r}")
    n_samples = _int(raw.get("n_samples", 1000), "n_samples", 2)
    seed = _seed(raw.get("seed", 0), "seed")
    output = _section(raw, "output", OutputSpec, {"path": _str, "trajectories": lambda v, p: _int(v, p, 0)})
    reference = _section(
        raw, "reference", ReferenceSpec,
        {"m_steps": lambda v, p: None if v is None else _int(v, p, 1), "n_samples": lambda v, p: None if v is None else _int(v, p, 2)},
    )
    if reference.m_steps is not None and reference.m_steps > schedule.n_train:
        raise ConfigError(f"reference.m_steps: exceeds schedule.n_train {schedule.n_train}")
    metrics = _section(raw, "metrics", MetricsSpec, {"n_projections": lambda v, p: _int(v, p, 16), "mmd_points": lambda v, p: _int(v, p, 2)})
    sweep = _section(raw, "sweep", SweepSpec, {"lambdas": _floats, "bootstrap": lambda v, p: _int(v, p, 0)})
    for lam in sweep.lambdas:
        if not 0 <= lam <= 1:
            raise ConfigError(f"sweep.lambdas: {lam} outside [0, 1]")
    convergence = _section(
        raw, "convergence", ConvergenceSpec,
        {"solvers": _strs, "m_steps": _ints, "n_reference": lambda v, p: _int(v, p, 2), "n_samples": lambda v, p: _int(v, p, 1)},
    )
    return ExperimentConfig(
        world=world, student=student, schedule=schedule, grid=grid, solver=solver, guidance=guidance,
        cfg=cfg, condition=condition, n_samples=n_samples, seed=seed, output=output, reference=reference,
        metrics=metrics, sweep=sweep, convergence=convergence,
    )


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ConfigError(f"parse error at {where}: {exc.problem}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"parse error: {exc}") from exc
    return config_from_dict(raw if raw is not None else {})


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def serialize_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)
