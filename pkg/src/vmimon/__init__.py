"""Deterministic simulator of hypervisor-based monitoring of container files.

A guest kernel keeps its dentry cache, processes and fd tables in simulated
guest memory; an out-of-band monitor watches dentry refcounts through page
permission traps and enforces per-file access policies.
"""

from .bench import BenchReport, compare_strategies, run_attack, run_attacks, run_startup
from .scenario import Scenario, ScenarioError
from .sim import Simulation, Strategy

__all__ = [
    "BenchReport",
    "Scenario",
    "ScenarioError",
    "Simulation",
    "Strategy",
    "compare_strategies",
    "run_attack",
    "run_attacks",
    "run_startup",
]

__version__ = "0.1.0"
