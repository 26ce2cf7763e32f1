import numpy as np
import pytest

from src.grid.geometry import (
    ObstacleSpec,
    build_cell_geometry,
    build_open_cell,
    build_thin_domain,
    geometry_from_dict,
    geometry_to_dict,
)
from src.utils.errors import (
    EmptyObstacle,
    IncompatibleTiling,
    InvalidParameter,
    ObstacleTouchesBoundary,
    ResolutionTooCoarse,
)


def test_sphere_porosity_close_to_analytic(sphere_cell_16):
    exact = 1.0 - 4.0 / 3.0 * np.pi * 0.25 ** 3
    assert sphere_cell_16.porosity == pytest.approx(exact, abs=0.02)
    assert sphere_cell_16.porosity == pytest.approx(sphere_cell_16.cell_mask.mean())


def test_sphere_mask_is_symmetric(sphere_cell_16):
    mask = sphere_cell_16.cell_mask
    np.testing.assert_array_equal(mask, mask[::-1, :, :])
    np.testing.assert_array_equal(mask, np.transpose(mask, (1, 0, 2)))


def test_face_active_only_between_fluid_cells(sphere_cell_8):
    mask = sphere_cell_8.cell_mask
    for axis, faces in enumerate(sphere_cell_8.face_masks):
        np.testing.assert_array_equal(faces, mask & np.roll(mask, -1, axis=axis))


def test_box_and_cylinder_obstacles():
    box = build_cell_geometry(ObstacleSpec(kind="box", size=(0.2, 0.2, 0.2)), 10)
    assert 0.0 < box.porosity < 1.0
    cylinder = build_cell_geometry(ObstacleSpec(kind="cylinder", size=(0.2, 0.3), axis=2), 10)
    assert cylinder.solid_count > 0


def test_obstacle_touching_boundary_rejected():
    with pytest.raises(ObstacleTouchesBoundary):
        build_cell_geometry(ObstacleSpec(kind="sphere", size=(0.49,)), 16)


def test_obstacle_between_cell_centers_is_empty():
    with pytest.raises(EmptyObstacle):
        build_cell_geometry(ObstacleSpec(kind="sphere", size=(0.01,)), 8)


def test_resolution_too_small_rejected(sphere):
    with pytest.raises(InvalidParameter):
        build_cell_geometry(sphere, 3)


def test_unknown_obstacle_kind_rejected():
    with pytest.raises(InvalidParameter):
        ObstacleSpec(kind="torus")


def test_open_cell_is_all_fluid():
    geom = build_open_cell(6)
    assert geom.cell_mask.all()
    assert geom.to_dict()["kind"] == "none"


def test_geometry_dict_roundtrip(sphere_cell_8):
    rebuilt = geometry_from_dict(geometry_to_dict(sphere_cell_8))
    np.testing.assert_array_equal(rebuilt.cell_mask, sphere_cell_8.cell_mask)
    assert rebuilt.fingerprint == sphere_cell_8.fingerprint


def test_thin_domain_aligned_grid(sphere):
    geom = build_thin_domain((1.0, 1.0), 0.25, 0.5, sphere, 8)
    assert geom.grid_shape == (32, 32, 16)
    assert geom.aligned
    assert geom.obstacle_count == 4 * 4 * 2
    assert geom.dropped_count == 0
    assert geom.spacings[2] == pytest.approx(0.5 / 16)


def test_thin_domain_drops_copies_cut_by_top(sphere):
    geom = build_thin_domain((1.0, 1.0), 0.125, np.sqrt(0.125), sphere, 8)
    assert not geom.aligned
    assert geom.dropped_count > 0
    assert geom.obstacle_count + geom.dropped_count == 8 * 8 * 3


def test_thin_domain_rejects_eps_not_dividing_omega(sphere):
    with pytest.raises(IncompatibleTiling):
        build_thin_domain((1.0, 1.0), 0.3, 0.6, sphere, 8)


def test_thin_domain_rejects_eps_above_h(sphere):
    with pytest.raises(InvalidParameter):
        build_thin_domain((1.0, 1.0), 0.25, 0.2, sphere, 8)


def test_thin_domain_too_coarse_for_small_obstacle():
    small = ObstacleSpec(kind="sphere", size=(0.05,))
    with pytest.raises(ResolutionTooCoarse):
        build_thin_domain((1.0, 1.0), 0.25, 0.5, small, 4)


def test_thin_domain_dict_roundtrip(sphere):
    geom = build_thin_domain((1.0, 1.0), 0.25, 0.5, sphere, 8)
    rebuilt = geometry_from_dict(geometry_to_dict(geom))
    assert rebuilt.grid_shape == geom.grid_shape
    np.testing.assert_array_equal(rebuilt.cell_mask, geom.cell_mask)


def test_aligned_box_porosity_is_exact():
    box = build_cell_geometry(ObstacleSpec(kind="box", size=(0.25, 0.25, 0.25)), 8)
    assert box.solid_count == 4 ** 3
    assert box.porosity == 0.875


def test_sphere_porosity_converges_at_first_order(sphere):
    exact = 1.0 - 4.0 / 3.0 * np.pi * 0.25 ** 3
    errors = {n: abs(build_cell_geometry(sphere, n).porosity - exact) for n in (8, 16, 32, 64)}
    for n, error in errors.items():
        # one surface layer of voxels bounds the error
        assert error <= 4.0 * np.pi * 0.25 ** 2 / n
    assert errors[64] <= 0.5 * errors[8]


def test_cell_mask_is_periodic(sphere_cell_16):
    mask = sphere_cell_16.cell_mask
    for axis in range(3):
        np.testing.assert_array_equal(np.roll(mask, 16, axis=axis), mask)


def test_thin_domain_repeats_the_cell_mask(sphere, sphere_cell_8):
    geom = build_thin_domain((1.0, 1.0), 0.25, 0.5, sphere, 8)
    np.testing.assert_array_equal(geom.cell_mask, np.tile(sphere_cell_8.cell_mask, (4, 4, 2)))


def test_thin_domain_with_third_period(sphere):
    geom = build_thin_domain((1.0, 1.0), 1.0 / 3.0, 0.5, sphere, 8)
    assert geom.grid_shape == (24, 24, 12)
    assert geom.spacings[2] == pytest.approx(geom.spacings[0])
    assert not geom.aligned
    # the upper layer of copies is cut by the top of the slab
    assert geom.obstacle_count == 9
    assert geom.dropped_count == 9
    with pytest.raises(IncompatibleTiling):
        build_thin_domain((1.0, 1.0), 0.3, 0.5, sphere, 8)


def test_thin_domain_with_vanishing_obstacle_never_silently_fluid():
    for radius in (0.02, 0.001):
        with pytest.raises(ResolutionTooCoarse):
            build_thin_domain((1.0, 1.0), 0.25, 0.5, ObstacleSpec(kind="sphere", size=(radius,)), 8)
