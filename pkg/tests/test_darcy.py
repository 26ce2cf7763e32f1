import numpy as np
import pandas as pd
import pytest

from src.homogenization.cell import PermeabilitySet
from src.homogenization.darcy import (
    MacroProblem,
    boundary_normal_flux,
    cell_centers_2d,
    flux_residuals,
    force_preset,
    load_force_csv,
    reconstruct_two_scale,
    solve_darcy,
)
from src.solvers.saddle_solver import PhysicalParams
from src.utils.errors import InconsistentInputs, InputFileError, NotPositiveDefinite


def _perm(K1, K2=None, L1=None, L2=None, N2=0.5):
    zero = np.zeros((2, 2))
    return PermeabilitySet(
        K1=np.asarray(K1, dtype=float),
        K2=zero if K2 is None else np.asarray(K2, dtype=float),
        L1=zero if L1 is None else np.asarray(L1, dtype=float),
        L2=np.eye(2) if L2 is None else np.asarray(L2, dtype=float),
        params=PhysicalParams(N2=N2, Rc=1.0),
        geometry={},
        tol=1e-10,
    )


ISOTROPIC = _perm([[0.02, 0.0], [0.0, 0.02]])
ANISOTROPIC = _perm([[0.03, 0.01], [0.01, 0.02]])


def _problem(perm, n, f, g=None):
    grid = (n, n)
    g = np.zeros((2, n, n)) if g is None else g
    return MacroProblem((1.0, 1.0), grid, f, g, perm)


def _preset(name, n, value=(1.0, 0.0)):
    z1, z2 = cell_centers_2d((1.0, 1.0), (n, n))
    return np.stack(force_preset(name, value, (1.0, 1.0))(z1, z2))


def _l2(a, n):
    return float(np.sqrt(np.sum(a ** 2) / n ** 2))


@pytest.mark.parametrize("perm", [ISOTROPIC, ANISOTROPIC])
@pytest.mark.parametrize("n,method", [(64, "direct"), (128, "cg")])
def test_constant_force_is_absorbed(perm, n, method):
    f = _preset("constant", n, value=(1.0, 0.5))
    solution = solve_darcy(_problem(perm, n, f), tol=1e-12, method=method)
    reference = _l2(np.einsum("ij,jab->iab", perm.K1, f), n)
    assert _l2(solution.U_prime, n) <= 1e-9 * reference


def test_gradient_force_absorbed_at_second_order():
    errors = []
    for n in (32, 64):
        f = _preset("gradient_cosine", n)
        solution = solve_darcy(_problem(ISOTROPIC, n, f), method="direct")
        errors.append(_l2(solution.U_prime, n))
    assert errors[0] / errors[1] >= 3.5


def _block_average(values, factor):
    n1, n2 = values.shape
    return values.reshape(n1 // factor, factor, n2 // factor, factor).mean(axis=(1, 3))


def test_self_convergence_order():
    reference = solve_darcy(_problem(ANISOTROPIC, 512, _preset("solenoidal_sine", 512)), method="direct").p
    errors = []
    for n in (64, 128):
        p = solve_darcy(_problem(ANISOTROPIC, n, _preset("solenoidal_sine", n)), tol=1e-12).p
        errors.append(_l2(p - _block_average(reference, 512 // n), n))
    assert np.log2(errors[0] / errors[1]) >= 1.8


def test_rotation_equivariance(rng):
    n = 32
    f = rng.standard_normal((2, n, n))
    base = solve_darcy(_problem(ISOTROPIC, n, f), method="direct")
    # rotate the data by 90 degrees about the center of omega
    rotated_f = np.stack([np.rot90(-f[1]), np.rot90(f[0])])
    rotated = solve_darcy(_problem(ISOTROPIC, n, rotated_f), method="direct")
    np.testing.assert_allclose(rotated.p, np.rot90(base.p), rtol=0, atol=1e-10 * np.abs(base.p).max())


def test_pressure_gauge_and_constant_shift(rng):
    n = 32
    f = rng.standard_normal((2, n, n))
    shift = np.array([0.7, -0.3])
    first = solve_darcy(_problem(ANISOTROPIC, n, f), method="direct")
    second = solve_darcy(_problem(ANISOTROPIC, n, f + shift[:, None, None]), method="direct")
    z1, z2 = cell_centers_2d((1.0, 1.0), (n, n))
    linear = shift[0] * z1 + shift[1] * z2
    scale = np.abs(second.p).max()
    np.testing.assert_allclose(second.p - first.p, linear - linear.mean(), rtol=0, atol=1e-10 * scale)
    np.testing.assert_allclose(second.U_prime, first.U_prime, rtol=0, atol=1e-9 * np.abs(first.U_prime).max())
    assert abs(first.p.mean()) <= 1e-13 * np.abs(first.p).max()


def test_flux_residuals_within_tolerance():
    n = 64
    solution = solve_darcy(_problem(ANISOTROPIC, n, _preset("solenoidal_sine", n)), tol=1e-10)
    residuals = flux_residuals(solution.problem, solution)
    assert residuals["relative_residual"] <= 2e-10
    assert residuals["boundary_flux_max"] < np.abs(solution.U_prime).max()
    assert residuals["global_balance"] <= 1e-12
    assert abs(residuals["pressure_mean"]) <= 1e-13 * np.abs(solution.p).max()


def test_boundary_normal_flux_extrapolates_linear_fields():
    n = 8
    z1, z2 = cell_centers_2d((1.0, 1.0), (n, n))
    flux = boundary_normal_flux(np.stack([z1, 2.0 * z2 - 1.0]))
    # left, right, bottom, top: -U1(0), U1(1), -U2(0), U2(1)
    expected = np.repeat([[0.0], [1.0], [1.0], [1.0]], n, axis=1)
    np.testing.assert_allclose(flux.reshape(4, n), expected, atol=1e-14)


def test_boundary_flux_vanishes_under_refinement():
    fluxes = []
    for n in (32, 128):
        solution = solve_darcy(_problem(ANISOTROPIC, n, _preset("solenoidal_sine", n)), method="direct")
        fluxes.append(solution.residuals["boundary_flux_max"] / np.abs(solution.U_prime).max())
    assert fluxes[1] <= 0.5 * fluxes[0]


def test_zero_force_gives_zero_solution():
    n = 16
    solution = solve_darcy(_problem(ISOTROPIC, n, np.zeros((2, n, n))))
    assert not solution.p.any()
    assert not solution.U_prime.any()


def test_indefinite_permeability_rejected():
    n = 8
    with pytest.raises(NotPositiveDefinite):
        solve_darcy(_problem(_perm([[1.0, 0.0], [0.0, -0.5]]), n, _preset("solenoidal_sine", n)))


def test_output_frame_columns():
    n = 8
    solution = solve_darcy(_problem(ISOTROPIC, n, _preset("solenoidal_sine", n)))
    frame = solution.to_frame()
    assert list(frame.columns) == ["z1", "z2", "p", "U1", "U2", "W1", "W2"]
    assert len(frame) == n * n


def test_force_csv_loading(tmp_path, rng):
    n = 8
    z1, z2 = cell_centers_2d((1.0, 1.0), (n, n))
    values = rng.standard_normal((2, n, n))
    frame = pd.DataFrame({"z1": z1.ravel(), "z2": z2.ravel(), "f1": values[0].ravel(), "f2": values[1].ravel()})
    path = tmp_path / "force.csv"
    frame.sample(frac=1.0, random_state=1).to_csv(path, index=False, float_format="%.17g")
    np.testing.assert_array_equal(load_force_csv(path, (n, n), (1.0, 1.0)), values)


def test_force_csv_errors(tmp_path):
    with pytest.raises(InputFileError, match="not found"):
        load_force_csv(tmp_path / "missing.csv", (8, 8), (1.0, 1.0))
    bad = tmp_path / "bad.csv"
    pd.DataFrame({"z1": [0.0625], "z2": [0.0625], "f1": [1.0]}).to_csv(bad, index=False)
    with pytest.raises(InputFileError, match="lacks columns"):
        load_force_csv(bad, (8, 8), (1.0, 1.0))
    partial = tmp_path / "partial.csv"
    pd.DataFrame({"z1": [0.0625], "z2": [0.0625], "f1": [1.0], "f2": [0.0]}).to_csv(partial, index=False)
    with pytest.raises(InputFileError, match="does not cover"):
        load_force_csv(partial, (8, 8), (1.0, 1.0))


@pytest.fixture(scope="module")
def macro_16(permeability_16):
    n = 16
    z1, z2 = cell_centers_2d((1.0, 1.0), (n, n))
    f = np.stack(force_preset("solenoidal_sine")(z1, z2))
    g = np.stack(force_preset("gradient_cosine")(z1, z2))
    return solve_darcy(MacroProblem((1.0, 1.0), (n, n), f, g, permeability_16), method="direct")


def test_two_scale_average_reproduces_darcy_velocity(cell_solutions_16, macro_16):
    evaluator = reconstruct_two_scale(cell_solutions_16, macro_16)
    scale = np.abs(macro_16.U_prime).max()
    for index in [(0, 0), (3, 11), (15, 15), (8, 4)]:
        average = evaluator.cell_average(index, "u")
        expected = macro_16.U_prime[:, index[0], index[1]]
        np.testing.assert_allclose(average[:2], expected, rtol=0, atol=1e-10 * scale)
        assert abs(average[2]) <= 1e-9
        w_average = evaluator.cell_average(index, "w")
        np.testing.assert_allclose(w_average[:2], macro_16.W_prime[:, index[0], index[1]],
                                   rtol=0, atol=1e-10 * max(np.abs(macro_16.W_prime).max(), 1.0))


def test_two_scale_pointwise_evaluation(cell_solutions_16, macro_16):
    evaluator = reconstruct_two_scale(cell_solutions_16, macro_16)
    u, w, pi = evaluator((0.3, 0.7), (0.0, 0.0, 0.0))
    assert u.shape == (3,) and w.shape == (3,)
    # y = 0 lies inside the sphere: every field vanishes there
    assert not u.any() and pi == 0.0


def test_two_scale_rejects_mismatched_cell_solutions(cell_solutions_16, macro_16):
    other = solve_darcy(MacroProblem((1.0, 1.0), (16, 16), macro_16.problem.f_prime,
                                     macro_16.problem.g_prime, _perm(np.eye(2) * 0.02, N2=0.25)),
                        method="direct")
    with pytest.raises(InconsistentInputs):
        reconstruct_two_scale(cell_solutions_16, other)
