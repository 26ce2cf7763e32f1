"""
Saddle-point solvers for the micropolar system.
"""

from .saddle_solver import MicropolarSystem, PhysicalParams, SolveStats, assemble, solve

__all__ = [
    "MicropolarSystem",
    "PhysicalParams",
    "SolveStats",
    "assemble",
    "solve"
]
