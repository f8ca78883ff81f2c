"""Manifold-constrained matrix optimizers (MACRO, MuonH, FSO) with training diagnostics."""

from .diag import measure_step, relative_lr, rotation_angle_fro, stable_rank, tangent_violation
from .harness import RunConfig, load_config, run, sweep
from .linalg import msign, msign_ns, msign_svd, norm, svd
from .manifold import Kind, ManifoldSpec, RadiusRule, feasibility_gap, radius_for, retract, tangent_project
from .optim import LrSchedule, OptimizerState, bisect_lambda, fso_step, macro_step, muon_step, muonh_step

__version__ = "0.1.0"

__all__ = [
    "Kind", "LrSchedule", "ManifoldSpec", "OptimizerState", "RadiusRule", "RunConfig",
    "bisect_lambda", "feasibility_gap", "fso_step", "load_config", "macro_step", "measure_step",
    "msign", "msign_ns", "msign_svd", "muon_step", "muonh_step", "norm", "radius_for",
    "relative_lr", "retract", "rotation_angle_fro", "run", "stable_rank", "svd", "sweep",
    "tangent_project", "tangent_violation",
]
