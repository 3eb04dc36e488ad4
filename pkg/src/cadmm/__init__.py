"""Consensus ADMM receding-horizon planning for multi-robot teams.

Two variants share one inner loop: ``convex`` keeps every agent inside its
buffered Voronoi cell, ``nonconvex`` imposes pairwise minimum-distance
constraints through successive linearization.
"""

from .config import ScenarioConfig, load_config
from .consensus import AdmmConfig, CostParams, run_admm
from .errors import AgentFailure, ConfigError
from .mpc import run_mpc
from .qp import QpProblem, brute_force_qp, solve_qp
from .scenario import export_metrics, generate_scenario, monte_carlo, run_trial

__all__ = [
    "AdmmConfig", "AgentFailure", "ConfigError", "CostParams", "QpProblem", "ScenarioConfig",
    "brute_force_qp", "export_metrics", "generate_scenario", "load_config", "monte_carlo",
    "run_admm", "run_mpc", "run_trial", "solve_qp",
]
__version__ = "0.1.0"
