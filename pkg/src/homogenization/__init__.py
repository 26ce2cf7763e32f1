"""
Cell problems, the homogenized Darcy problem, unfolding checks and resolved runs.
"""

from .cell import PermeabilitySet, permeability_for, solve_all_cell_problems
from .darcy import MacroProblem, MacroSolution, solve_darcy
from .unfolding import fold, unfold, run_identity_suite
from .resolved import ScalingReport, run_sweep, scaling_report

__all__ = [
    "PermeabilitySet",
    "permeability_for",
    "solve_all_cell_problems",
    "MacroProblem",
    "MacroSolution",
    "solve_darcy",
    "fold",
    "unfold",
    "run_identity_suite",
    "ScalingReport",
    "run_sweep",
    "scaling_report"
]
