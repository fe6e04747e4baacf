"""Optimal feedback synthesis through the Bellman function of a semi-quadratic
control problem, computed on a Lagrange-Pontryagin manifold, with a Maslov
canonical-operator regularization near caustics."""

from __future__ import annotations

from .bellman import (BellmanResult, CausticCloud, OutsideRegion, bellman_query, bellman_query_batch,
                      detect_caustics)
from .control import (FeedbackLaw, SimulationResult, feedback_eval, optimality_gap, simulate_closed_loop,
                      write_trajectory_csv)
from .diagnostics import run_checks
from .localsolve import LocalSolution, LocalSolveError, solve_local, solve_riccati
from .lpmanifold import Atlas, AtlasError, build_atlas, read_atlas, write_atlas
from .maslov import (BumpCover, RegularizedField, build_charts, build_regularized_field, canonical_apply,
                     log_maslov_real, regularized_bellman, subcanonical_apply)
from .sysdef import SystemSpec, SystemSpecError, validate_system

__version__ = "0.1.0"

__all__ = [
    "Atlas", "AtlasError", "BellmanResult", "BumpCover", "CausticCloud", "FeedbackLaw", "LocalSolution",
    "LocalSolveError", "OutsideRegion", "RegularizedField", "SimulationResult", "SystemSpec", "SystemSpecError",
    "bellman_query", "bellman_query_batch", "build_atlas", "build_charts", "build_regularized_field",
    "canonical_apply", "detect_caustics", "feedback_eval", "log_maslov_real", "optimality_gap", "read_atlas",
    "regularized_bellman", "run_checks", "simulate_closed_loop", "solve_local", "solve_riccati",
    "subcanonical_apply", "validate_system", "write_atlas", "write_trajectory_csv",
]
