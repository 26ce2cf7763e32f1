"""
Unfolding module.
Discrete unfolding of fields on the dilated thin domain: the domain is cut
into blocks of horizontal length eps and vertical length eps/h, and every
block is reindexed onto the reference cell Y (change of variables
y' = (z' - eps k')/eps, y3 = (h z3 - eps k3)/eps).

On aligned grids this is a pure reshape, so the norm and derivative-scaling
identities hold exactly under cellwise-constant quadrature.
"""
import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.grid.geometry import ThinDomainGeometry
from src.grid.operators import CenterScalarField, StaggeredVectorField
from src.utils.errors import GeometryMismatch, IncompatibleTiling, InvalidParameter, OnCellBoundary
from src.utils.helpers import is_integer_ratio

logger = logging.getLogger(__name__)

_BOUNDARY_TOL = 1e-12


def kappa(point: Sequence[float], eps: float, h: float) -> Tuple[int, int, int]:
    """Lattice index of the block containing a point of the dilated domain.

    Uses the scaled argument (z1/eps, z2/eps, h z3/eps) in every slot.

    Raises:
        OnCellBoundary: the point lies on a block face.
    """
    if eps <= 0 or h <= 0:
        raise InvalidParameter("eps and h must be positive")
    z = np.asarray(point, dtype=float)
    scaled = np.array([z[0] / eps, z[1] / eps, h * z[2] / eps])
    nearest = np.rint(scaled)
    if np.any(np.abs(scaled - nearest) <= _BOUNDARY_TOL * np.maximum(1.0, np.abs(scaled))):
        raise OnCellBoundary(f"point {tuple(z)} lies on a cell boundary; perturb by half a grid spacing")
    k = np.floor(scaled).astype(int)
    return int(k[0]), int(k[1]), int(k[2])


@dataclass
class DilatedField:
    """Field on the dilated domain omega x (0, 1), z3 = x3 / h."""
    values: np.ndarray
    spacings: Tuple[float, float, float]
    eps: float
    h: float


def dilate(values: np.ndarray, spacings: Sequence[float], eps: float, h: float) -> DilatedField:
    """Dilate a field sampled on the physical thin grid; only the vertical spacing changes."""
    dx, dy, dz = (float(s) for s in spacings)
    return DilatedField(np.asarray(values), (dx, dy, dz / h), float(eps), float(h))


@dataclass
class UnfoldedField:
    """Block data of shape (K0, K1, K2, m, m, m), with a leading component axis for vectors.

    ``support`` is ``Y_f`` when the field was extended by zero outside the
    fluid cells of its thin domain and ``Y`` otherwise.
    """
    data: np.ndarray
    eps: float
    h: float
    m: int
    blocks: Tuple[int, int, int]
    support: str = "Y"

    @property
    def block_measure(self) -> float:
        """Measure of one block of the dilated domain, eps^2 * (eps / h)."""
        return self.eps ** 3 / self.h

    @property
    def reference_cell_volume(self) -> float:
        return 1.0 / self.m ** 3

    def norm(self) -> float:
        weight = self.block_measure * self.reference_cell_volume
        return float(np.sqrt(weight * np.sum(self.data ** 2)))


def _tiling(shape: Sequence[int], eps: float, h: float, extent: Sequence[float], m: Optional[int]):
    if not is_integer_ratio(h, eps):
        raise IncompatibleTiling(f"h/eps must be an integer for exact unfolding (h={h}, eps={eps})")
    blocks = [int(round(extent[0] / eps)), int(round(extent[1] / eps)), int(round(h / eps))]
    for L in extent:
        if not is_integer_ratio(L, eps):
            raise IncompatibleTiling(f"omega side {L} is not a whole number of eps-cells (eps={eps})")
    if m is None:
        m = shape[0] // blocks[0] if blocks[0] else 0
    if m < 1 or any(n != b * m for n, b in zip(shape, blocks)):
        raise IncompatibleTiling(
            f"grid {tuple(shape)} does not tile into {tuple(blocks)} blocks of {m}^3 cells"
        )
    return tuple(blocks), int(m)


def _unfold_array(values: np.ndarray, blocks, m) -> np.ndarray:
    K0, K1, K2 = blocks
    lead = values.shape[:-3]
    reshaped = values.reshape(lead + (K0, m, K1, m, K2, m))
    n = len(lead)
    order = tuple(range(n)) + tuple(n + a for a in (0, 2, 4, 1, 3, 5))
    return reshaped.transpose(order).copy()


def _field_values(values, geometry):
    """Plain array of a field plus the geometry it lives on, if it carries one."""
    if isinstance(values, DilatedField):
        return np.asarray(values.values), geometry
    if isinstance(values, StaggeredVectorField):
        return np.stack(values.components), geometry or values.geometry
    if isinstance(values, CenterScalarField):
        return np.asarray(values.values), geometry or values.geometry
    return np.asarray(values), geometry


def _zero_extend(values: np.ndarray, geometry: ThinDomainGeometry, eps: float, h: float) -> np.ndarray:
    """Values outside the fluid part of the slab set to zero."""
    if not isinstance(geometry, ThinDomainGeometry):
        raise InvalidParameter("zero extension needs a geometry from build_thin_domain")
    if not (np.isclose(geometry.eps, eps) and np.isclose(geometry.h, h)):
        raise GeometryMismatch(
            f"field geometry has eps={geometry.eps}, h={geometry.h}; unfolding uses eps={eps}, h={h}"
        )
    if tuple(values.shape[-3:]) != tuple(geometry.grid_shape):
        raise GeometryMismatch(
            f"field grid {values.shape[-3:]} differs from the geometry grid {geometry.grid_shape}"
        )
    return np.where(geometry.cell_mask, values, 0.0)


def unfold(
    values,
    eps: float,
    h: float,
    extent: Optional[Sequence[float]] = None,
    m: Optional[int] = None,
    geometry: Optional[ThinDomainGeometry] = None,
) -> UnfoldedField:
    """Reindex a field on the aligned dilated grid block by block.

    Args:
        values: Array (N0, N1, N2) or (c, N0, N1, N2), a DilatedField, or a
            field from a resolved run.
        eps: Period.
        h: Thickness of the physical slab.
        extent: Side lengths of omega; defaults to the geometry's, else (1, 1).
        m: Cells per period; inferred from the grid when omitted.
        geometry: Thin domain the field lives on. When known (passed or
            carried by the field) the field is extended by zero outside the
            fluid cells and unfolded over Y_f; otherwise over all of Y.

    Raises:
        IncompatibleTiling: the grid does not split into whole blocks.
        GeometryMismatch: the field does not match the geometry.
    """
    values, geometry = _field_values(values, geometry)
    if values.ndim not in (3, 4):
        raise InvalidParameter("unfold expects a 3D field or a stack of 3D components")
    support = "Y"
    if geometry is not None:
        values = _zero_extend(values, geometry, eps, h)
        extent = geometry.omega_extent if extent is None else extent
        m = geometry.cells_per_period if m is None else m
        support = "Y_f"
    extent = (1.0, 1.0) if extent is None else tuple(extent)
    blocks, m = _tiling(values.shape[-3:], eps, h, extent, m)
    return UnfoldedField(_unfold_array(values, blocks, m), float(eps), float(h), m, blocks, support)


def unfold_scalar(
    values, eps: float, h: float, extent: Optional[Sequence[float]] = None, m: Optional[int] = None
) -> UnfoldedField:
    """Unfolding of a pressure-type function over the whole reference cell Y."""
    values, _ = _field_values(values, None)
    return unfold(values, eps, h, extent=extent, m=m)


def fold(unfolded: UnfoldedField) -> np.ndarray:
    """Inverse reindexing; fold(unfold(v)) reproduces v bitwise."""
    data = unfolded.data
    K0, K1, K2 = unfolded.blocks
    m = unfolded.m
    lead = data.shape[:-6]
    n = len(lead)
    order = tuple(range(n)) + tuple(n + a for a in (0, 3, 1, 4, 2, 5))
    return data.transpose(order).reshape(lead + (K0 * m, K1 * m, K2 * m)).copy()


def fold_scalar(unfolded: UnfoldedField) -> np.ndarray:
    return fold(unfolded)


def _in_block_differences(values: np.ndarray, axis: int, m: int) -> np.ndarray:
    """One-sided differences along ``axis`` skipping pairs that straddle two blocks."""
    diff = np.diff(values, axis=axis)
    keep = (np.arange(diff.shape[axis]) + 1) % m != 0
    return np.compress(keep, diff, axis=axis)


def norm_identities(
    values: np.ndarray,
    eps: float,
    h: float,
    extent: Optional[Sequence[float]] = None,
    m: Optional[int] = None,
    geometry: Optional[ThinDomainGeometry] = None,
) -> Dict[str, Dict[str, float]]:
    """Compare the unfolded norms with the dilated-domain norms.

    Identities checked, with difference quotients taken inside blocks:
        |phi_hat| = |phi|,  |grad_{y'} phi_hat| = eps |grad_{z'} phi|,
        |d_{y3} phi_hat| = (eps / h) |d_{z3} phi|.

    With a geometry the dilated-domain side uses the zero-extended field.
    """
    unfolded = unfold(values, eps, h, extent=extent, m=m, geometry=geometry)
    values = fold(unfolded).astype(float)
    m = unfolded.m
    dz = (eps / m, eps / m, eps / (h * m))
    fine_volume = float(np.prod(dz))
    weight = unfolded.block_measure * unfolded.reference_cell_volume
    lead = values.ndim - 3
    y_axes = [lead + 3, lead + 4, lead + 5]
    z_axes = [lead, lead + 1, lead + 2]

    def y_grad(axis):
        return np.sum((np.diff(unfolded.data, axis=y_axes[axis]) * m) ** 2)

    def z_grad(axis):
        return np.sum((_in_block_differences(values, z_axes[axis], m) / dz[axis]) ** 2)

    report = {
        "value": {
            "unfolded": float(np.sqrt(weight * np.sum(unfolded.data ** 2))),
            "expected": float(np.sqrt(fine_volume * np.sum(values ** 2))),
        },
        "grad_inplane": {
            "unfolded": float(np.sqrt(weight * (y_grad(0) + y_grad(1)))),
            "expected": float(eps * np.sqrt(fine_volume * (z_grad(0) + z_grad(1)))),
        },
        "d_vertical": {
            "unfolded": float(np.sqrt(weight * y_grad(2))),
            "expected": float((eps / h) * np.sqrt(fine_volume * z_grad(2))),
        },
    }
    for entry in report.values():
        scale = max(abs(entry["expected"]), np.finfo(float).tiny)
        entry["relative_error"] = abs(entry["unfolded"] - entry["expected"]) / scale
    return report


def run_identity_suite(
    eps: float,
    h: float,
    m: int,
    seed: int,
    extent: Sequence[float] = (1.0, 1.0),
    tolerance: float = 1e-13,
) -> List[Dict[str, Any]]:
    """Unfolding checks on a seeded random vector field; one dict per check."""
    blocks = (int(round(extent[0] / eps)), int(round(extent[1] / eps)), int(round(h / eps)))
    rng = np.random.default_rng(seed)
    field_ = rng.standard_normal((3,) + tuple(b * m for b in blocks))
    checks: List[Dict[str, Any]] = []

    for name, entry in norm_identities(field_, eps, h, extent=extent, m=m).items():
        checks.append({
            "check": f"unfolding_{name}",
            "value": entry["relative_error"],
            "tolerance": tolerance,
            "passed": bool(entry["relative_error"] <= tolerance),
        })

    roundtrip = np.array_equal(fold(unfold(field_, eps, h, extent=extent, m=m)), field_)
    checks.append({"check": "fold_unfold_identity", "value": 0.0 if roundtrip else 1.0,
                   "tolerance": 0.0, "passed": bool(roundtrip)})

    constant = np.full(field_.shape[1:], 3.5)
    const_blocks = unfold(constant, eps, h, extent=extent, m=m).data
    checks.append({"check": "unfold_constant", "value": float(np.abs(const_blocks - 3.5).max()),
                   "tolerance": 0.0, "passed": bool(np.all(const_blocks == 3.5))})

    # lattice translations of a point inside block (0, 0, 0)
    base = np.array([0.3 * eps, 0.6 * eps, 0.45 * eps / h])
    k0 = kappa(base, eps, h)
    k1 = kappa(base + np.array([eps, 0.0, 0.0]), eps, h)
    k3 = kappa(base + np.array([0.0, 0.0, eps / h]), eps, h)
    translated = k1 == (k0[0] + 1, k0[1], k0[2]) and k3 == (k0[0], k0[1], k0[2] + 1)
    checks.append({"check": "kappa_translation", "value": 0.0 if translated else 1.0,
                   "tolerance": 0.0, "passed": bool(translated)})
    logger.info("unfolding suite: %d/%d checks passed", sum(c["passed"] for c in checks), len(checks))
    return checks
