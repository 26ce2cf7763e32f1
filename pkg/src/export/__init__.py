"""
Result writers and plots.
"""

from .writers import read_permeability, write_permeability, write_report
from .plots import plot_macro_solution

__all__ = [
    "read_permeability",
    "write_permeability",
    "write_report",
    "plot_macro_solution"
]
