"""
Geometry module.
Voxelized periodic reference cell Y = (-1/2, 1/2)^3 with an obstacle T, and the
resolved thin perforated slab built from eps-scaled copies of the same cell.

Membership is decided at cell centers. Lattice cell k of the slab occupies
eps * (k + [0, 1)^3) and carries local coordinates y = x / eps - k - 1/2.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Optional, Tuple

import numpy as np

from src.utils.errors import (
    EmptyFluid,
    EmptyObstacle,
    IncompatibleTiling,
    InvalidParameter,
    ObstacleTouchesBoundary,
    ResolutionTooCoarse,
)
from src.utils.helpers import fingerprint, is_integer_ratio

logger = logging.getLogger(__name__)

_GEOM_TOL = 1e-12


class ObstacleKind(str, Enum):
    SPHERE = "sphere"
    BOX = "box"
    CYLINDER = "cylinder"


@dataclass(frozen=True)
class ObstacleSpec:
    """Axis-aligned obstacle T in reference-cell units.

    ``size`` is ``(radius,)`` for a sphere, the three half-extents for a box and
    ``(radius, half_length)`` for a cylinder whose axis is ``axis``.
    """
    kind: ObstacleKind = ObstacleKind.SPHERE
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    size: Tuple[float, ...] = (0.25,)
    axis: int = 2

    def __post_init__(self):
        try:
            kind = ObstacleKind(self.kind)
        except ValueError:
            raise InvalidParameter(
                f"unknown obstacle kind '{self.kind}' (expected sphere, box or cylinder)"
            )
        object.__setattr__(self, "kind", kind)
        center = tuple(float(c) for c in self.center)
        size = tuple(float(s) for s in np.atleast_1d(self.size))
        if len(center) != 3:
            raise InvalidParameter("obstacle center needs three coordinates")
        expected = {ObstacleKind.SPHERE: 1, ObstacleKind.BOX: 3, ObstacleKind.CYLINDER: 2}[kind]
        if len(size) != expected:
            raise InvalidParameter(f"{kind.value} obstacle needs {expected} size value(s), got {len(size)}")
        if any(s <= 0.0 for s in size):
            raise InvalidParameter("obstacle sizes must be positive")
        if self.axis not in (0, 1, 2):
            raise InvalidParameter("cylinder axis must be 0, 1 or 2")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)

    def half_extents(self) -> np.ndarray:
        if self.kind is ObstacleKind.SPHERE:
            return np.full(3, self.size[0])
        if self.kind is ObstacleKind.BOX:
            return np.asarray(self.size)
        radius, half_length = self.size
        extents = np.full(3, radius)
        extents[self.axis] = half_length
        return extents

    def contains(self, y0, y1, y2) -> np.ndarray:
        """Strict membership test of points (broadcastable coordinate arrays)."""
        d = [np.asarray(y0) - self.center[0],
             np.asarray(y1) - self.center[1],
             np.asarray(y2) - self.center[2]]
        if self.kind is ObstacleKind.SPHERE:
            return d[0] ** 2 + d[1] ** 2 + d[2] ** 2 < self.size[0] ** 2
        if self.kind is ObstacleKind.BOX:
            return (np.abs(d[0]) < self.size[0]) & (np.abs(d[1]) < self.size[1]) & (np.abs(d[2]) < self.size[2])
        radius, half_length = self.size
        others = [a for a in range(3) if a != self.axis]
        radial = d[others[0]] ** 2 + d[others[1]] ** 2
        return (radial < radius ** 2) & (np.abs(d[self.axis]) < half_length)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind.value,
            "center": list(self.center),
            "size": list(self.size),
            "axis": self.axis,
        }


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def _face_masks(cell_mask: np.ndarray, periodic: bool) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Face i along an axis sits between cells i and i+1 (wrapped when periodic)."""
    masks = []
    for axis in range(3):
        mask = cell_mask & np.roll(cell_mask, -1, axis=axis)
        if not periodic:
            index = [slice(None)] * 3
            index[axis] = -1
            mask[tuple(index)] = False
        masks.append(_frozen(mask))
    return tuple(masks)


def _check_inside(shape: ObstacleSpec, spacing: float) -> None:
    reach = np.abs(np.asarray(shape.center)) + shape.half_extents()
    margin = 0.5 - reach
    if np.any(margin < spacing - _GEOM_TOL):
        axis = int(np.argmin(margin))
        raise ObstacleTouchesBoundary(
            f"obstacle reaches {reach[axis]:.4g} along axis {axis}; the closure of T must stay "
            f"at least one grid spacing ({spacing:.4g}) inside Y"
        )


@dataclass(frozen=True, eq=False)
class CellGeometry:
    """Discretized periodic unit cell. ``cell_mask`` is True on fluid cells."""
    shape: Optional[ObstacleSpec]
    n: int
    spacing: float
    cell_mask: np.ndarray
    face_masks: Tuple[np.ndarray, np.ndarray, np.ndarray]
    porosity: float
    periodic: bool = field(default=True, init=False)

    @property
    def grid_shape(self) -> Tuple[int, int, int]:
        return (self.n, self.n, self.n)

    @property
    def spacings(self) -> Tuple[float, float, float]:
        return (self.spacing, self.spacing, self.spacing)

    @property
    def cell_volume(self) -> float:
        return self.spacing ** 3

    @property
    def bc(self) -> str:
        return "periodic"

    @property
    def solid_count(self) -> int:
        return int(self.cell_mask.size - self.cell_mask.sum())

    def axis_coordinates(self, axis: int, staggered: bool = False) -> np.ndarray:
        offset = 1.0 if staggered else 0.5
        return -0.5 + (np.arange(self.n) + offset) * self.spacing

    def cell_centers(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return _mesh([self.axis_coordinates(a) for a in range(3)])

    def face_centers(self, axis: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return _mesh([self.axis_coordinates(a, staggered=(a == axis)) for a in range(3)])

    def to_dict(self) -> Dict[str, Any]:
        payload = {"n": self.n}
        payload.update(self.shape.to_dict() if self.shape is not None else {"kind": "none"})
        return payload

    @property
    def fingerprint(self) -> str:
        return fingerprint({"geometry": self.to_dict()})


@dataclass(frozen=True, eq=False)
class ThinDomainGeometry:
    """Resolved slab Omega_eps = (omega x (0, h)) minus the stamped obstacle copies."""
    eps: float
    h: float
    omega_extent: Tuple[float, float]
    cells_per_period: int
    shape: ObstacleSpec
    grid_shape: Tuple[int, int, int]
    spacings: Tuple[float, float, float]
    cell_mask: np.ndarray
    face_masks: Tuple[np.ndarray, np.ndarray, np.ndarray]
    obstacle_count: int
    dropped_count: int
    periodic: bool = field(default=False, init=False)

    @property
    def bc(self) -> str:
        return "dirichlet_box"

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacings))

    @property
    def porosity(self) -> float:
        return float(self.cell_mask.mean())

    @property
    def blocks(self) -> Tuple[int, int, int]:
        """Number of eps-blocks per axis (vertical count rounded up)."""
        b0 = int(round(self.omega_extent[0] / self.eps))
        b1 = int(round(self.omega_extent[1] / self.eps))
        b2 = int(np.ceil(self.h / self.eps - 1e-9))
        return (b0, b1, b2)

    @property
    def aligned(self) -> bool:
        """True when the vertical grid tiles exactly into eps/h_eps blocks (dilated units)."""
        return (is_integer_ratio(self.h, self.eps)
                and self.grid_shape[2] == self.blocks[2] * self.cells_per_period)

    def axis_coordinates(self, axis: int, staggered: bool = False) -> np.ndarray:
        offset = 1.0 if staggered else 0.5
        return (np.arange(self.grid_shape[axis]) + offset) * self.spacings[axis]

    def cell_centers(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return _mesh([self.axis_coordinates(a) for a in range(3)])

    def face_centers(self, axis: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return _mesh([self.axis_coordinates(a, staggered=(a == axis)) for a in range(3)])

    def to_dict(self) -> Dict[str, Any]:
        payload = self.shape.to_dict()
        payload.update({
            "eps": self.eps,
            "h": self.h,
            "omega_extent": list(self.omega_extent),
            "m": self.cells_per_period,
        })
        return payload

    @property
    def fingerprint(self) -> str:
        return fingerprint({"thin_domain": self.to_dict()})


def _mesh(axes):
    return tuple(np.meshgrid(*axes, indexing="ij"))


def build_cell_geometry(shape: ObstacleSpec, n: int) -> CellGeometry:
    """Voxelize the obstacle ``shape`` on an n^3 periodic grid of the unit cell."""
    if n < 4:
        raise InvalidParameter(f"cell resolution n={n} too small (n >= 4 required)")
    if shape is None:
        raise EmptyObstacle("no obstacle given; use build_open_cell for an obstacle-free cell")
    spacing = 1.0 / n
    _check_inside(shape, spacing)

    coords = -0.5 + (np.arange(n) + 0.5) * spacing
    solid = shape.contains(*_mesh([coords, coords, coords]))
    if not solid.any():
        raise EmptyObstacle(f"obstacle {shape.kind.value} covers no cell center at n={n}")
    if solid.all():
        raise EmptyFluid(f"obstacle fills the whole cell at n={n}")

    cell_mask = _frozen(~solid)
    porosity = float(cell_mask.sum()) * spacing ** 3
    logger.debug("cell geometry %s n=%d porosity=%.6f", shape.kind.value, n, porosity)
    return CellGeometry(
        shape=shape,
        n=n,
        spacing=spacing,
        cell_mask=cell_mask,
        face_masks=_face_masks(cell_mask, periodic=True),
        porosity=porosity,
    )


def build_open_cell(n: int) -> CellGeometry:
    """Obstacle-free periodic cell, used to check operators on analytic fields."""
    if n < 4:
        raise InvalidParameter(f"cell resolution n={n} too small (n >= 4 required)")
    cell_mask = _frozen(np.ones((n, n, n), dtype=bool))
    return CellGeometry(
        shape=None,
        n=n,
        spacing=1.0 / n,
        cell_mask=cell_mask,
        face_masks=_face_masks(cell_mask, periodic=True),
        porosity=1.0,
    )


def build_thin_domain(
    omega_extent: Tuple[float, float],
    eps: float,
    h: float,
    shape: ObstacleSpec,
    m: int,
) -> ThinDomainGeometry:
    """Stamp the eps-periodic obstacle lattice into the slab omega x (0, h).

    Copies whose bounding box comes closer than one grid spacing to the slab
    boundary are dropped, including copies cut by the top of the slab when
    h / eps is not an integer.
    """
    if m < 4:
        raise InvalidParameter(f"cells_per_period m={m} too small (m >= 4 required)")
    if not 0.0 < eps < h:
        raise InvalidParameter(f"eps < h required (got eps={eps}, h={h})")
    if not is_integer_ratio(1.0, eps):
        raise IncompatibleTiling(f"1/eps must be an integer (got eps={eps})")
    extent = tuple(float(L) for L in omega_extent)
    for L in extent:
        if not is_integer_ratio(L, eps):
            raise IncompatibleTiling(f"omega side {L} is not a whole number of eps-cells (eps={eps})")
    _check_inside(shape, 1.0 / m)

    dx = eps / m
    n0 = int(round(extent[0] / eps)) * m
    n1 = int(round(extent[1] / eps)) * m
    if is_integer_ratio(h, eps):
        n2 = int(round(h / eps)) * m
    else:
        n2 = max(1, int(round(h / dx)))
    dz = h / n2
    spacings = (dx, dx, dz)
    lengths = (extent[0], extent[1], h)

    # lattice copies kept: bounding box at least one spacing inside the slab
    blocks = (n0 // m, n1 // m, int(np.ceil(h / eps - 1e-9)))
    extents = shape.half_extents()
    keep = np.ones(blocks, dtype=bool)
    for axis in range(3):
        k = np.arange(blocks[axis])
        center = eps * (k + 0.5 + shape.center[axis])
        ok = ((center - eps * extents[axis] >= spacings[axis] - _GEOM_TOL)
              & (center + eps * extents[axis] <= lengths[axis] - spacings[axis] + _GEOM_TOL))
        view = [1, 1, 1]
        view[axis] = -1
        keep &= ok.reshape(view)

    local, block_index = [], []
    for axis, count in enumerate((n0, n1, n2)):
        x = (np.arange(count) + 0.5) * spacings[axis]
        kb = np.floor(x / eps + _GEOM_TOL).astype(int)
        block_index.append(kb)
        local.append(x / eps - kb - 0.5)

    inside = shape.contains(*_mesh(local))
    kb0, kb1, kb2 = _mesh(block_index)
    solid = inside & keep[kb0, kb1, kb2]

    copy_id = np.ravel_multi_index((kb0[solid], kb1[solid], kb2[solid]), blocks)
    voxels = np.bincount(copy_id, minlength=int(np.prod(blocks))).reshape(blocks)
    if not solid.any() or np.any(voxels[keep] == 0):
        raise ResolutionTooCoarse(
            f"obstacle occupies less than one cell at m={m} (eps={eps}, spacing {dx:.4g})"
        )

    cell_mask = _frozen(~solid)
    if not cell_mask.any():
        raise EmptyFluid("thin domain has no fluid cell")
    kept = int(keep.sum())
    logger.info(
        "thin domain eps=%g h=%g grid=%dx%dx%d obstacles=%d dropped=%d",
        eps, h, n0, n1, n2, kept, keep.size - kept,
    )
    return ThinDomainGeometry(
        eps=float(eps),
        h=float(h),
        omega_extent=extent,
        cells_per_period=m,
        shape=shape,
        grid_shape=(n0, n1, n2),
        spacings=spacings,
        cell_mask=cell_mask,
        face_masks=_face_masks(cell_mask, periodic=False),
        obstacle_count=kept,
        dropped_count=int(keep.size - kept),
    )


def obstacle_from_dict(payload: Dict[str, Any]) -> ObstacleSpec:
    return ObstacleSpec(
        kind=payload.get("kind", "sphere"),
        center=tuple(payload.get("center", (0.0, 0.0, 0.0))),
        size=tuple(payload.get("size", (0.25,))),
        axis=int(payload.get("axis", 2)),
    )


def geometry_to_dict(geom) -> Dict[str, Any]:
    return geom.to_dict()


def geometry_from_dict(payload: Dict[str, Any]):
    """Rebuild a cell geometry (or a thin domain when ``eps`` is present)."""
    if payload.get("kind") == "none":
        return build_open_cell(int(payload["n"]))
    shape = obstacle_from_dict(payload)
    if "eps" in payload:
        return build_thin_domain(
            tuple(payload.get("omega_extent", (1.0, 1.0))),
            float(payload["eps"]),
            float(payload["h"]),
            shape,
            int(payload["m"]),
        )
    return build_cell_geometry(shape, int(payload["n"]))
