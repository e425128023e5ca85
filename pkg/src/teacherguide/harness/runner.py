"""Batch orchestration: variants, reference sets, metric tables and plot data.

Trajectories are split into contiguous index blocks that run on a thread
pool. Each block owns its per-trajectory streams, so merged results do not
depend on the worker count; merging is always by trajectory index.
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ..guidance import GuidanceConfig, run_distillation_pp
from ..metrics import metric_report, noise_floor, sliced_wasserstein, trajectory_endpoint_error
from ..rng import TrajectoryRng, stream_for
from ..schedule import make_grid
from ..solvers import sample
from ..world import CountingDenoiser, MixtureWorld, TeacherDenoiser, make_student
from .config import ExperimentConfig

REFERENCE_OFFSET = 2**40
FRESH_OFFSET = 2**41
BLOCK = 2048

RESULT_COLUMNS = ("config_hash", "variant", "metric", "value", "teacher_calls", "student_calls", "params")
ABLATION_LABELS = ("baseline", "random", "same", "decreasing")
PLOT_HEADERS = {
    "convergence": ("M", "solver", "endpoint_error"),
    "ablation": ("variant", "metric", "value"),
    "sweep": ("lambda", "metric", "value", "ci_low", "ci_high"),
}


class RunError(RuntimeError):
    pass


class RequestError(ValueError):
    """The requested variant or export does not fit the config or table."""


@dataclass
class Row:
    config_hash: str
    variant: str
    metric: str
    value: float
    wall_time_ms: float = 0.0
    teacher_calls: int = 0
    student_calls: int = 0
    params: dict = field(default_factory=dict)

    def key(self) -> tuple:
        return (self.variant, self.metric)


@dataclass
class ResultTable:
    rows: list[Row] = field(default_factory=list)
    complete: bool = True

    def add(self, row: Row):
        if any(r.key() == row.key() for r in self.rows):
            raise RunError(f"duplicate row for {row.key()}")
        self.rows.append(row)

    def extend(self, rows):
        for r in rows:
            self.add(r)

    def __len__(self):
        return len(self.rows)

    def variants(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.variant not in seen:
                seen.append(r.variant)
        return seen

    def value(self, variant: str, metric: str) -> float:
        for r in self.rows:
            if r.variant == variant and r.metric == metric:
                return r.value
        raise KeyError((variant, metric))

    def row(self, variant: str, metric: str) -> Row:
        for r in self.rows:
            if r.variant == variant and r.metric == metric:
                return r
        raise KeyError((variant, metric))

    def write_csv(self, path: str):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RESULT_COLUMNS)
            for r in self.rows:
                w.writerow([r.config_hash, r.variant, r.metric, repr(float(r.value)), r.teacher_calls, r.student_calls,
                            json.dumps(r.params, sort_keys=True)])
            if not self.complete:
                w.writerow(["", "FAILED", "incomplete", "nan", 0, 0, "{}"])

    def write_timing(self, path: str):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("variant", "metric", "wall_time_ms"))
            for r in self.rows:
                w.writerow([r.variant, r.metric, f"{r.wall_time_ms:.3f}"])

    @classmethod
    def read_csv(cls, path: str) -> ResultTable:
        table = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                if rec["variant"] == "FAILED":
                    table.complete = False
                    continue
                table.rows.append(Row(rec["config_hash"], rec["variant"], rec["metric"], float(rec["value"]),
                                      0.0, int(rec["teacher_calls"]), int(rec["student_calls"]), json.loads(rec["params"])))
        return table


@dataclass
class VariantRun:
    label: str
    samples: np.ndarray
    init: np.ndarray
    student_calls: int
    teacher_calls: int
    wall_time_ms: float
    trajectories: list = field(default_factory=list)
    guidance: GuidanceConfig | None = None
    m_steps: int = 0


@dataclass
class ExperimentResult:
    table: ResultTable
    runs: dict
    reference: np.ndarray | None = None
    floor: float | None = None


def _blocks(n: int, start: int = 0, block: int = BLOCK):
    return [(start + i, min(block, n - i)) for i in range(0, n, block)]


def _map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _models(config: ExperimentConfig):
    schedule = config.build_schedule()
    teacher = TeacherDenoiser(config.world, schedule)
    student = make_student(config.student, config.world, schedule)
    return schedule, teacher, student


def run_variant(config: ExperimentConfig, label: str, guidance: GuidanceConfig, *, m_steps: int | None = None,
                workers: int = 1, keep_trajectories: int = 0) -> VariantRun:
    """Sample ``config.n_samples`` student trajectories under ``guidance``."""
    schedule, teacher, student = _models(config)
    grid = config.build_grid(m_steps)
    sv = config.solver

    def block(item):
        start, n = item
        rng = TrajectoryRng.range(config.seed, n, start)
        traj = run_distillation_pp(
            student, teacher, sv.kind, grid, schedule, guidance, config.cfg, rng,
            dim=config.world.dim, condition=config.condition, eta=sv.eta, r=sv.r, solver_mode=sv.mode,
        )
        return traj

    t0 = time.perf_counter()
    trajs = _map(block, _blocks(config.n_samples), workers)
    wall = (time.perf_counter() - t0) * 1e3
    return VariantRun(
        label=label,
        samples=np.concatenate([t.final for t in trajs]),
        init=np.concatenate([t.init for t in trajs]),
        student_calls=sum(t.calls["student"] for t in trajs),
        teacher_calls=sum(t.calls["teacher"] for t in trajs),
        wall_time_ms=wall,
        trajectories=[trajs[0]] if keep_trajectories else [],
        guidance=guidance,
        m_steps=grid.m_steps,
    )


def reference_set(config: ExperimentConfig, workers: int = 1) -> tuple[np.ndarray, int, float]:
    """Fine-step teacher DDIM samples on trajectory indices disjoint from the variants."""
    schedule = config.build_schedule()
    teacher = CountingDenoiser(TeacherDenoiser(config.world, schedule))
    grid = make_grid(schedule, config.reference_steps, config.grid.spacing)
    n = config.reference.n_samples or config.n_samples

    def block(item):
        start, m = item
        return sample(teacher, "ddim", grid, schedule, rng=TrajectoryRng.range(config.seed, m, start),
                      dim=config.world.dim, condition=config.condition).final

    t0 = time.perf_counter()
    out = np.concatenate(_map(block, _blocks(n, REFERENCE_OFFSET), workers))
    return out, teacher.calls, (time.perf_counter() - t0) * 1e3


def fresh_draws(config: ExperimentConfig, n: int) -> np.ndarray:
    rng = stream_for(config.seed, "analytic").generator()
    return config.world.sample(n, rng, config.condition)


def _gaussian_target(world: MixtureWorld, condition):
    w, mu, v = world.select(condition)
    return (mu[0], v[0]) if w.size == 1 else None


def _metric_rows(config, run: VariantRun, reference: np.ndarray) -> list[Row]:
    report = metric_report(
        run.samples, reference,
        n_projections=config.metrics.n_projections,
        rng=stream_for(config.seed, "projection").generator(),
        mmd_points=config.metrics.mmd_points,
        gaussian=_gaussian_target(config.world, config.condition),
    )
    params = {"m_steps": run.m_steps}
    if run.guidance is not None:
        params.update(run.guidance.to_dict())
    return [
        Row(config.config_hash, run.label, name, float(value), run.wall_time_ms, run.teacher_calls, run.student_calls, dict(params))
        for name, value in report.rows()
    ]


def _reference_rows(config, reference, calls, wall, floor) -> list[Row]:
    params = {"m_steps": config.reference_steps, "n": int(reference.shape[0])}
    return [Row(config.config_hash, "reference", "noise_floor", floor, wall, calls, 0, params)]


def _floor(config, reference) -> float:
    fresh = fresh_draws(config, reference.shape[0])
    return noise_floor(reference, fresh, config.metrics.n_projections, stream_for(config.seed, "projection").generator())


def _run_variants(config, specs, workers, keep_trajectories=None) -> ExperimentResult:
    """``specs`` is a list of ``(label, GuidanceConfig, m_steps or None)``."""
    if keep_trajectories is None:
        keep_trajectories = config.output.trajectories
    table = ResultTable()
    runs = {}
    reference, ref_calls, ref_wall = reference_set(config, workers)
    floor = _floor(config, reference)
    try:
        for label, guidance, m_steps in specs:
            run = run_variant(config, label, guidance, m_steps=m_steps, workers=workers, keep_trajectories=keep_trajectories)
            runs[label] = run
            table.extend(_metric_rows(config, run, reference))
    except Exception as exc:
        table.complete = False
        raise PartialRunError(ExperimentResult(table, runs, reference, floor)) from exc
    table.extend(_reference_rows(config, reference, ref_calls, ref_wall, floor))
    return ExperimentResult(table, runs, reference, floor)


class PartialRunError(RunError):
    def __init__(self, partial: ExperimentResult):
        super().__init__("run failed; partial results attached")
        self.partial = partial


def _select(specs, variant: str | None):
    if variant is None:
        return specs
    chosen = [s for s in specs if s[0] == variant]
    if not chosen:
        raise RequestError(f"unknown variant {variant!r}; choose from {[s[0] for s in specs]}")
    return chosen


def run_experiment(config: ExperimentConfig, workers: int = 1, variant: str | None = None) -> ExperimentResult:
    """Baseline (``k = 0``) plus the configured guided variant, scored against the teacher reference."""
    specs = [("baseline", replace(config.guidance, k=0), None)]
    if config.guidance.enabled:
        specs.append(("guided", config.guidance, None))
    return _run_variants(config, _select(specs, variant), workers)


def run_ablation_renoise(config: ExperimentConfig, workers: int = 1, variant: str | None = None) -> ExperimentResult:
    """Baseline and the three renoising schedules, all on the same trajectory streams."""
    if not config.guidance.enabled:
        raise RequestError("renoise ablation needs guidance enabled (k > 0, lambda > 0)")
    specs = [("baseline", replace(config.guidance, k=0), None)]
    specs += [(mode, replace(config.guidance, renoise=mode), None) for mode in ABLATION_LABELS[1:]]
    return _run_variants(config, _select(specs, variant), workers)


def sweep_lambda(config: ExperimentConfig, workers: int = 1, variant: str | None = None) -> ExperimentResult:
    specs = [(f"lambda={lam:g}", replace(config.guidance, lam=lam), None) for lam in config.sweep.lambdas]
    result = _run_variants(config, _select(specs, variant), workers)
    _add_bootstrap(config, result)
    return result


def _add_bootstrap(config, result: ExperimentResult):
    """Percentile interval of the sliced-Wasserstein value by resampling the student set."""
    n_boot = config.sweep.bootstrap
    for label, run in result.runs.items():
        row = result.table.row(label, "sliced_wasserstein")
        if n_boot == 0:
            row.params.update(ci_low=row.value, ci_high=row.value)
            continue
        rng = stream_for(config.seed, "probe").generator()
        vals = []
        for _ in range(n_boot):
            idx = rng.integers(run.samples.shape[0], size=run.samples.shape[0])
            vals.append(sliced_wasserstein(run.samples[idx], result.reference, config.metrics.n_projections,
                                           stream_for(config.seed, "projection").generator()))
        lo, hi = np.quantile(vals, [0.025, 0.975])
        row.params.update(ci_low=float(lo), ci_high=float(hi))


def compare_steps(config: ExperimentConfig, workers: int = 1, variant: str | None = None) -> ExperimentResult:
    """``M+1`` guided runs against plain ``M+1``-step runs at equal total model rounds."""
    m = config.grid.m_steps
    guided = config.guidance if config.guidance.enabled else replace(config.guidance, k=1)
    specs = [
        (f"{m}+1", replace(guided, k=1), m),
        (f"{m + 1} step", replace(guided, k=0), m + 1),
        (f"{m + 1}+1", replace(guided, k=1), m + 1),
        (f"{m + 2} step", replace(guided, k=0), m + 2),
    ]
    return _run_variants(config, _select(specs, variant), workers)


def run_convergence(config: ExperimentConfig, workers: int = 1) -> ResultTable:
    """Endpoint error of each solver against its own fine-grid run, teacher model, shared ``x_T``."""
    schedule = config.build_schedule()
    teacher = TeacherDenoiser(config.world, schedule)
    spec = config.convergence
    rng_init = TrajectoryRng.range(config.seed, spec.n_samples)
    init = rng_init.bank("init").standard_normal((spec.n_samples, config.world.dim))
    table = ResultTable()

    def one(solver):
        t0 = time.perf_counter()
        ref = sample(teacher, solver, make_grid(schedule, spec.n_reference, config.grid.spacing), schedule, init=init)
        rows = []
        for m in spec.m_steps:
            traj = sample(teacher, solver, make_grid(schedule, m, config.grid.spacing), schedule, init=init)
            err = trajectory_endpoint_error(traj, ref)
            rows.append(Row(config.config_hash, solver, f"endpoint_error@{m}", err, (time.perf_counter() - t0) * 1e3,
                            0, 0, {"M": m, "solver": solver, "n_reference": spec.n_reference}))
        return rows

    for rows in _map(one, list(spec.solvers), workers):
        table.extend(rows)
    return table


def convergence_slope(table: ResultTable, solver: str) -> float:
    rows = [r for r in table.rows if r.variant == solver and r.metric.startswith("endpoint_error@")]
    ms = np.array([r.params["M"] for r in rows], dtype=float)
    errs = np.array([r.value for r in rows])
    return float(-np.polyfit(np.log(ms), np.log(errs), 1)[0])


def export_plotdata(table: ResultTable, kind: str, out_dir: str) -> str:
    """Write ``plot_<kind>.csv`` with the documented header and return its path.

    Sweep intervals are bootstrapped for sliced-Wasserstein only; other
    metrics repeat the point value in ``ci_low``/``ci_high``.
    """
    if kind not in PLOT_HEADERS:
        raise RequestError(f"unknown plot kind {kind!r}")
    if len(table) == 0:
        raise RequestError("empty result table")
    rows = []
    if kind == "convergence":
        for r in table.rows:
            if r.metric.startswith("endpoint_error@"):
                rows.append([r.params["M"], r.params["solver"], repr(r.value)])
    elif kind == "ablation":
        for r in table.rows:
            if r.variant in ABLATION_LABELS:
                rows.append([r.variant, r.metric, repr(r.value)])
    else:
        for r in table.rows:
            if r.variant.startswith("lambda="):
                lo = r.params.get("ci_low", r.value)
                hi = r.params.get("ci_high", r.value)
                rows.append([repr(r.params["lambda"]), r.metric, repr(r.value), repr(lo), repr(hi)])
    if not rows:
        raise RequestError(f"table has no rows for a {kind} plot")
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"plot_{kind}.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PLOT_HEADERS[kind])
        w.writerows(rows)
    return path


def write_trajectories(path: str, seed: int, runs: dict, limit: int):
    """Columnar dump of recorded trajectories: seed, variant, traj, step, t, x_*, x0_hat_*."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = None
        for label, run in runs.items():
            for traj in run.trajectories:
                d = traj.final.shape[1]
                if header is None:
                    header = ["seed", "variant", "traj", "step", "t"] + [f"x_{j}" for j in range(d)] + [f"x0_hat_{j}" for j in range(d)]
                    w.writerow(header)
                rows = min(limit, traj.final.shape[0])
                for i in range(rows):
                    for step, rec in enumerate(traj.records):
                        x0 = rec.x0[i] if rec.x0 is not None else np.full(d, np.nan)
                        w.writerow([seed, label, int(traj.stream_ids[i]), step, repr(rec.t)]
                                   + [repr(float(v)) for v in rec.x[i]] + [repr(float(v)) for v in x0])


def write_outputs(result: ExperimentResult, config: ExperimentConfig, out_dir: str, seed_range=None):
    os.makedirs(out_dir, exist_ok=True)
    result.table.write_csv(os.path.join(out_dir, "results.csv"))
    result.table.write_timing(os.path.join(out_dir, "timing.csv"))
    seed_range = seed_range or [0, config.n_samples]
    metrics = [
        {"config_hash": r.config_hash, "variant": r.variant, "metric": r.metric, "value": r.value,
         "n": config.n_samples, "seed_range": list(seed_range)}
        for r in result.table.rows
    ]
    with open(os.path.join(out_dir, "metrics.json"), "w", encoding="utf-8") as fh:
        json.dump({"config_hash": config.config_hash, "seed": config.seed, "complete": result.table.complete,
                   "rows": metrics}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if any(run.trajectories for run in result.runs.values()):
        write_trajectories(os.path.join(out_dir, "trajectories.csv"), config.seed, result.runs, config.output.trajectories)


__all__ = [
    "ExperimentResult",
    "RequestError",
    "ResultTable",
    "Row",
    "compare_steps",
    "convergence_slope",
    "export_plotdata",
    "run_ablation_renoise",
    "run_convergence",
    "run_experiment",
    "run_variant",
    "sweep_lambda",
    "write_outputs",
]
