"""Teacher-guided student sampling on analytic Gaussian-mixture diffusion worlds."""

from .guidance import GuidanceConfig, revise_estimate, run_distillation_pp, sds_loss
from .metrics import mmd_rbf, sliced_wasserstein
from .rng import TrajectoryRng
from .schedule import NoiseSchedule, TimeGrid, build_schedule, custom_grid, dpm_quantities, make_grid
from .solvers import SolverKind, Trajectory, sample
from .world import CfgParams, MixtureWorld, StudentSpec, TeacherDenoiser, make_student

__version__ = "0.1.0"

__all__ = [
    "CfgParams",
    "GuidanceConfig",
    "MixtureWorld",
    "NoiseSchedule",
    "SolverKind",
    "StudentSpec",
    "TeacherDenoiser",
    "TimeGrid",
    "Trajectory",
    "TrajectoryRng",
    "build_schedule",
    "custom_grid",
    "dpm_quantities",
    "make_grid",
    "make_student",
    "mmd_rbf",
    "revise_estimate",
    "run_distillation_pp",
    "sample",
    "sds_loss",
    "sliced_wasserstein",
]
