"""Activated random walks in the site-wise instruction representation.

Submodules: :mod:`arw.graphs` (finite balls and walk statistics),
:mod:`arw.core` (configurations, instruction tapes, toppling),
:mod:`arw.stabilize` (stabilization procedures), :mod:`arw.estimators`
(Monte Carlo estimators and bound checks) and :mod:`arw.cli` (experiment
runner).
"""
from .core import (Context, InitDist, InstructionTape, ModelParams, ParticleConfig, SleepMask,
                   apply_sleep_mask, init_config, read_instruction, topple)
from .estimators import (drift_factor, estimate_activity, estimate_mu_c,
                         estimate_Q_and_check_bounds, estimate_sufficient_condition,
                         simulate_branching)
from .graphs import GraphSpec, build_graph, estimate_rw_stats, hitting_prob, sphere_of
from .stabilize import (ghost_estimate_transient, layered_stabilize, stabilize,
                        stabilize_via_weak, tree_pack_stabilize, weak_stabilize)

__version__ = "0.1.0"

__all__ = [
    "Context", "GraphSpec", "InitDist", "InstructionTape", "ModelParams", "ParticleConfig",
    "SleepMask", "apply_sleep_mask", "build_graph", "drift_factor", "estimate_Q_and_check_bounds",
    "estimate_activity", "estimate_mu_c", "estimate_rw_stats", "estimate_sufficient_condition",
    "ghost_estimate_transient", "hitting_prob", "init_config", "layered_stabilize",
    "read_instruction", "simulate_branching", "sphere_of", "stabilize", "stabilize_via_weak",
    "topple", "tree_pack_stabilize", "weak_stabilize",
]
