"""Shared fixtures: the default sphere cell and its cell-problem solutions are expensive."""
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from src.grid.geometry import ObstacleSpec, build_cell_geometry
from src.homogenization.cell import compute_permeabilities, solve_all_cell_problems
from src.solvers.saddle_solver import PhysicalParams

TOL = 1e-10


@pytest.fixture(scope="session")
def sphere() -> ObstacleSpec:
    return ObstacleSpec(kind="sphere", center=(0.0, 0.0, 0.0), size=(0.25,))


@pytest.fixture(scope="session")
def sphere_cell_8(sphere):
    return build_cell_geometry(sphere, 8)


@pytest.fixture(scope="session")
def sphere_cell_16(sphere):
    return build_cell_geometry(sphere, 16)


@pytest.fixture(scope="session")
def default_params() -> PhysicalParams:
    return PhysicalParams(N2=0.5, Rc=1.0)


@pytest.fixture(scope="session")
def cell_solutions_16(sphere_cell_16, default_params):
    return solve_all_cell_problems(sphere_cell_16, default_params, tol=TOL)


@pytest.fixture(scope="session")
def permeability_16(cell_solutions_16):
    return compute_permeabilities(cell_solutions_16, tol=TOL)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
