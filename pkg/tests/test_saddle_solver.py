from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from src.grid.geometry import build_open_cell
from src.grid.operators import BoundaryCondition
from src.homogenization.cell import cell_rhs
from src.solvers.saddle_solver import (
    PhysicalParams,
    assemble,
    assemble_stokes,
    energy_identity_residual,
    solve,
)
from src.utils.errors import InvalidParameter, NoConvergence, SingularProblem

TOL = 1e-10


@pytest.fixture(scope="module")
def system_8(sphere_cell_8):
    return assemble(sphere_cell_8, PhysicalParams(N2=0.5, Rc=1.0))


@pytest.fixture(scope="module")
def solved_8(system_8):
    rhs_u = cell_rhs(system_8, 1)
    rhs_w = np.zeros(system_8.n_w)
    u, w, p, stats = solve(system_8, rhs_u, rhs_w, tol=TOL)
    return rhs_u, rhs_w, u, w, p, stats


@pytest.mark.parametrize("N2", [-0.1, 1.0, 1.5])
def test_params_reject_coupling_outside_unit_interval(N2):
    with pytest.raises(InvalidParameter, match="0 < N2 < 1 required"):
        PhysicalParams(N2=N2, Rc=1.0)


def test_params_reject_nonpositive_rc():
    with pytest.raises(InvalidParameter):
        PhysicalParams(N2=0.5, Rc=0.0)


def test_dimension_counts(system_8):
    ops = system_8.operators
    assert system_8.n_u == system_8.n_w == ops.n_faces
    assert system_8.n_p == ops.n_cells
    assert system_8.matrix.shape == (2 * ops.n_faces + ops.n_cells,) * 2


def test_matrix_is_symmetric(system_8):
    asym = abs(system_8.matrix - system_8.matrix.T).max()
    assert asym <= 1e-14 * abs(system_8.matrix).max()


def test_zero_coupling_has_no_coupling_block(sphere_cell_8):
    system = assemble(sphere_cell_8, PhysicalParams(N2=0.0, Rc=1.0))
    assert system.coupling_block.nnz == 0


def test_obstacle_free_periodic_cell_is_singular():
    with pytest.raises(SingularProblem):
        assemble(build_open_cell(8), PhysicalParams(N2=0.5, Rc=1.0))


def test_zero_rhs_returns_zero_solution(system_8):
    u, w, p, stats = solve(system_8, np.zeros(system_8.n_u), np.zeros(system_8.n_w), tol=TOL)
    assert stats.iterations == 0
    assert not u.any() and not w.any() and not p.any()


def test_solve_converges_to_tolerance(solved_8, system_8):
    rhs_u, rhs_w, u, w, p, stats = solved_8
    assert stats.converged
    b = np.concatenate([rhs_u, rhs_w, np.zeros(system_8.n_p)])
    r = b - system_8.matrix @ np.concatenate([u, w, p])
    assert np.linalg.norm(r) <= TOL * np.linalg.norm(b) * (1 + 1e-6)


def test_pressure_has_zero_mean(solved_8):
    p = solved_8[4]
    assert abs(p.mean()) <= 1e-12 * max(1.0, np.abs(p).max())


def test_energy_identity_holds(solved_8, system_8):
    rhs_u, rhs_w, u, w, _, _ = solved_8
    assert energy_identity_residual(system_8, u, w, rhs_u, rhs_w) <= 1e-8


def test_solution_superposes_loads(system_8, solved_8):
    rhs_u, _, u1, w1, p1, _ = solved_8
    torque = cell_rhs(system_8, 2)
    zero_u, zero_w = np.zeros(system_8.n_u), np.zeros(system_8.n_w)
    u2, w2, p2, _ = solve(system_8, zero_u, torque, tol=TOL)
    u, w, p, _ = solve(system_8, rhs_u, torque, tol=TOL)
    np.testing.assert_allclose(u, u1 + u2, rtol=0, atol=1e-7 * np.abs(u).max())
    np.testing.assert_allclose(w, w1 + w2, rtol=0, atol=1e-7 * np.abs(w).max())
    np.testing.assert_allclose(p, p1 + p2, rtol=0, atol=1e-7 * np.abs(p).max())


def test_threads_factorize_their_own_preconditioner(sphere_cell_8, solved_8):
    system = assemble(sphere_cell_8, PhysicalParams(N2=0.5, Rc=1.0))
    rhs_u, rhs_w, u_ref = solved_8[0], solved_8[1], solved_8[2]
    with ThreadPoolExecutor(max_workers=2) as pool:
        operators = list(pool.map(lambda _: system.preconditioner("lu")[0], range(2)))
        results = list(pool.map(lambda _: solve(system, rhs_u, rhs_w, tol=TOL, preconditioner="lu"), range(4)))
    # the calling thread gets yet another handle
    main_operator = system.preconditioner("lu")[0]
    assert all(op is not main_operator for op in operators)
    assert system.preconditioner("lu")[0] is main_operator
    for u, _, _, stats in results:
        assert stats.converged
        np.testing.assert_allclose(u, u_ref, rtol=0, atol=1e-7 * np.abs(u_ref).max())


def test_jacobi_preconditioner_also_converges(system_8, solved_8):
    rhs_u, rhs_w, u, _, _, _ = solved_8
    u2, _, _, stats = solve(system_8, rhs_u, rhs_w, tol=TOL, preconditioner="jacobi", max_iter=20000)
    assert stats.preconditioner == "jacobi"
    np.testing.assert_allclose(u2, u, rtol=0, atol=1e-4 * np.abs(u).max())


def test_iteration_cap_raises_with_best_iterate(system_8, solved_8):
    rhs_u, rhs_w = solved_8[0], solved_8[1]
    with pytest.raises(NoConvergence) as info:
        solve(system_8, rhs_u, rhs_w, tol=TOL, max_iter=2)
    assert info.value.stats is not None and not info.value.stats.converged
    assert info.value.best is not None and not info.value.valid


def test_tolerance_must_be_tight(system_8, solved_8):
    with pytest.raises(InvalidParameter):
        solve(system_8, solved_8[0], solved_8[1], tol=1e-2)


def test_stokes_system_has_no_microrotation(sphere_cell_8):
    system = assemble_stokes(sphere_cell_8, BoundaryCondition.PERIODIC)
    assert not system.has_microrotation
    u, w, p, stats = solve(system, cell_rhs(system, 1), tol=TOL)
    assert stats.converged and w.size == 0
