import numpy as np
import pytest

from src.grid.geometry import build_open_cell, build_thin_domain
from src.grid.operators import (
    BoundaryCondition,
    build_operators,
    constant_faces,
    divergence_norm,
    from_cells,
    from_faces,
    gradient_energy,
    mass_norm,
    project_divergence_free,
    rot_energy_pairing,
    sample_faces,
    to_cells,
    to_faces,
)
from src.utils.errors import GeometryMismatch


@pytest.fixture(scope="module")
def ops_8(sphere_cell_8):
    return build_operators(sphere_cell_8)


@pytest.fixture(scope="module")
def ops_16(sphere_cell_16):
    return build_operators(sphere_cell_16)


@pytest.mark.parametrize("which", ["ops_8", "ops_16"])
def test_divergence_is_negative_adjoint_of_gradient(which, request, rng):
    ops = request.getfixturevalue(which)
    for _ in range(100):
        v = rng.standard_normal(ops.n_faces)
        q = rng.standard_normal(ops.n_cells)
        lhs = np.dot(ops.D @ v, q) + np.dot(v, ops.G @ q)
        scale = np.linalg.norm(ops.D @ v) * np.linalg.norm(q) + np.linalg.norm(v) * np.linalg.norm(ops.G @ q)
        assert abs(lhs) <= 1e-13 * scale


@pytest.mark.parametrize("which", ["ops_8", "ops_16"])
def test_rot_pairing_is_symmetric(which, request, rng):
    ops = request.getfixturevalue(which)
    for _ in range(100):
        a = rng.standard_normal(ops.n_faces)
        b = rng.standard_normal(ops.n_faces)
        forward = rot_energy_pairing(a, b, ops)
        adjoint = ops.volume * np.dot(a, ops.R.T @ b)
        scale = ops.volume * np.linalg.norm(ops.R @ a) * np.linalg.norm(b)
        assert abs(forward - adjoint) <= 1e-13 * max(scale, 1e-300)


def test_laplacian_is_symmetric_positive_semidefinite(ops_8, rng):
    assert abs(ops_8.A - ops_8.A.T).max() <= 1e-12 * abs(ops_8.A).max()
    for _ in range(10):
        v = rng.standard_normal(ops_8.n_faces)
        assert gradient_energy(ops_8, v) >= 0.0


def test_divergence_of_constant_field_vanishes_on_open_cell():
    ops = build_operators(build_open_cell(8))
    v = constant_faces(ops, (1.0, -2.0, 0.5))
    assert divergence_norm(ops, v) <= 1e-12
    assert gradient_energy(ops, v) == pytest.approx(0.0, abs=1e-20)


def test_rot_of_constant_field_vanishes_on_open_cell():
    ops = build_operators(build_open_cell(8))
    v = constant_faces(ops, (1.0, 2.0, 3.0))
    assert np.abs(ops.R @ v).max() <= 1e-12


def _rot_error(n: int) -> float:
    """Max error of R on a = (0, 0, sin(2 pi y0)), whose curl is (0, -2 pi cos(2 pi y0), 0)."""
    geom = build_open_cell(n)
    ops = build_operators(geom)
    a = sample_faces(ops, [None, None, lambda y0, y1, y2: np.sin(2 * np.pi * y0)])
    exact = sample_faces(ops, [None, lambda y0, y1, y2: -2 * np.pi * np.cos(2 * np.pi * y0), None])
    return float(np.abs(ops.R @ a - exact).max())


def test_rot_converges_at_second_order():
    coarse, fine = _rot_error(16), _rot_error(32)
    assert coarse / fine >= 3.6


def test_rot_bounded_by_gradient_on_divergence_free_fields(ops_16, rng):
    for _ in range(100):
        a = project_divergence_free(ops_16, rng.standard_normal(ops_16.n_faces))
        assert divergence_norm(ops_16, a) <= 1e-8 * mass_norm(ops_16, a)
        rot = ops_16.R @ a
        rot_sq = ops_16.volume * np.dot(rot, rot)
        assert rot_sq <= (1.0 + 1e-6) * gradient_energy(ops_16, a)


def test_field_conversion_roundtrip(ops_8, rng):
    v = rng.standard_normal(ops_8.n_faces)
    field_ = from_faces(ops_8, v)
    assert field_.components[0].shape == (8, 8, 8)
    assert mass_norm(ops_8, field_) == pytest.approx(mass_norm(ops_8, v))
    np.testing.assert_array_equal(to_faces(ops_8, field_), v)
    q = rng.standard_normal(ops_8.n_cells)
    np.testing.assert_array_equal(to_cells(ops_8, from_cells(ops_8, q)), q)


def test_pairing_rejects_fields_on_different_geometries(sphere_cell_8, sphere_cell_16, ops_8, ops_16, rng):
    a = from_faces(ops_8, rng.standard_normal(ops_8.n_faces))
    b = from_faces(ops_16, rng.standard_normal(ops_16.n_faces))
    with pytest.raises(GeometryMismatch):
        rot_energy_pairing(a, b)


def test_dirichlet_box_closes_domain_walls(sphere):
    geom = build_thin_domain((1.0, 1.0), 0.25, 0.5, sphere, 4)
    ops = build_operators(geom, BoundaryCondition.DIRICHLET_BOX)
    assert ops.full_shape == tuple(n + 1 for n in geom.grid_shape)
    assert ops.has_dirichlet_faces
    # no active face touches the padding layer
    for axis, index in enumerate(ops.face_index):
        coords = np.unravel_index(index, ops.full_shape)
        assert coords[axis].max() < geom.grid_shape[axis] - 1
