"""
Operators module.
Staggered (MAC) grid operators on a CellGeometry or ThinDomainGeometry.

Layout: pressure lives at cell centers, component a of a vector field on the
faces normal to axis a. Face i along an axis sits between cells i and i+1.
All matrices are assembled on a periodic full grid from Kronecker products of
1D shift matrices and then restricted to the active faces and fluid cells;
inactive unknowns are eliminated, never penalized. Wall-bounded domains get
one extra solid cell layer per axis so the same periodic assembly applies.

Matrices act on plain vectors; the inner product on faces and cells is the
uniform cell volume, so M = vol * I and D = -G^T exactly.
"""
import logging
import weakref
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from src.utils.errors import GeometryMismatch, InvalidParameter

logger = logging.getLogger(__name__)


class BoundaryCondition(str, Enum):
    PERIODIC = "periodic"
    DIRICHLET_BOX = "dirichlet_box"


@dataclass(eq=False)
class StaggeredVectorField:
    """Three face-centered components on the geometry's grid (zero on inactive faces)."""
    components: Tuple[np.ndarray, np.ndarray, np.ndarray]
    spacings: Tuple[float, float, float]
    geometry: object

    def __getitem__(self, axis: int) -> np.ndarray:
        return self.components[axis]

    def integral(self, axis: int) -> float:
        return float(self.components[axis].sum() * np.prod(self.spacings))


@dataclass(eq=False)
class CenterScalarField:
    """Cell-centered scalar; ``values`` is zero on solid cells."""
    values: np.ndarray
    fluid_mask: np.ndarray
    geometry: object
    mean_zero: bool = False

    def mean(self) -> float:
        return float(self.values[self.fluid_mask].mean())


def _shift(n: int) -> sp.csr_matrix:
    """Periodic shift (S x)_i = x_{i+1}."""
    return (sp.eye(n, k=1, format="csr") + sp.eye(n, k=-(n - 1), format="csr")).tocsr()


def _lift(matrix, axis: int, shape: Tuple[int, int, int]) -> sp.csr_matrix:
    factors = [matrix if a == axis else sp.identity(shape[a], format="csr") for a in range(3)]
    return sp.kron(sp.kron(factors[0], factors[1]), factors[2], format="csr")


def _restrict(matrix, rows: np.ndarray, cols: np.ndarray) -> sp.csr_matrix:
    return matrix.tocsr()[rows].tocsc()[:, cols].tocsr()


@dataclass(frozen=True, eq=False)
class DiscreteOperatorSet:
    """Assembled operators restricted to the active unknowns of one geometry.

    Face vectors are the concatenation of the active faces of axis 0, 1, 2
    (``face_slices``); ``face_index[a]`` holds their flat positions in the
    full (possibly padded) grid, ``cell_index`` those of the fluid cells.
    """
    geometry: object
    bc: BoundaryCondition
    full_shape: Tuple[int, int, int]
    spacings: Tuple[float, float, float]
    face_index: Tuple[np.ndarray, np.ndarray, np.ndarray]
    cell_index: np.ndarray
    G: sp.csr_matrix
    D: sp.csr_matrix
    A: sp.csr_matrix
    R: sp.csr_matrix
    M: sp.dia_matrix
    volume: float
    component_laplacians: Tuple[sp.csr_matrix, sp.csr_matrix, sp.csr_matrix] = field(repr=False)

    @property
    def domain_shape(self) -> Tuple[int, int, int]:
        return tuple(self.geometry.grid_shape)

    @property
    def n_faces(self) -> int:
        return int(sum(len(idx) for idx in self.face_index))

    @property
    def n_cells(self) -> int:
        return int(len(self.cell_index))

    @property
    def face_slices(self) -> Tuple[slice, slice, slice]:
        bounds = np.cumsum([0] + [len(idx) for idx in self.face_index])
        return tuple(slice(int(bounds[a]), int(bounds[a + 1])) for a in range(3))

    @property
    def has_dirichlet_faces(self) -> bool:
        total = 3 * int(np.prod(self.full_shape))
        return self.n_faces < total

    @cached_property
    def _pressure_poisson(self):
        # G^T G with the first fluid cell pinned; G annihilates constants
        laplacian = (self.G.T @ self.G).tocsc()
        return splu(laplacian[1:, 1:].tocsc())


def _crop(ops: DiscreteOperatorSet):
    return tuple(slice(0, n) for n in ops.domain_shape)


def build_operators(geom, bc: Optional[BoundaryCondition] = None) -> DiscreteOperatorSet:
    """Assemble G, D, A, R and M for ``geom``.

    Args:
        geom: CellGeometry or ThinDomainGeometry.
        bc: ``periodic`` wraps the grid; ``dirichlet_box`` closes every side
            with a layer of solid cells. Defaults to the geometry's own closure.

    Returns:
        DiscreteOperatorSet on the active faces and fluid cells.
    """
    try:
        bc = BoundaryCondition(bc if bc is not None else geom.bc)
    except ValueError:
        raise InvalidParameter(f"unknown boundary condition '{bc}'")

    cell_mask = np.asarray(geom.cell_mask)
    if bc is BoundaryCondition.DIRICHLET_BOX:
        cell_mask = np.pad(cell_mask, [(0, 1)] * 3, constant_values=False)
    shape = cell_mask.shape
    spacings = tuple(float(s) for s in geom.spacings)
    volume = float(np.prod(spacings))
    n_total = int(np.prod(shape))

    fwd_diff, fwd_avg, bwd_avg = [], [], []
    for axis in range(3):
        shift = _shift(shape[axis])
        eye = sp.identity(shape[axis], format="csr")
        fwd_diff.append(_lift((shift - eye) / spacings[axis], axis, shape))
        average = (eye + shift) * 0.5
        fwd_avg.append(_lift(average, axis, shape))
        bwd_avg.append(_lift(average.T, axis, shape))

    laplacians = [fd.T @ fd for fd in fwd_diff]
    laplacian = (laplacians[0] + laplacians[1] + laplacians[2]).tocsr()

    G_full = sp.vstack(fwd_diff, format="csr")
    A_full = sp.block_diag([laplacian] * 3, format="csr")

    # curl: faces -> edges, (C phi)_a = d_{a+1} phi_{a+2} - d_{a+2} phi_{a+1}
    blocks = [[None] * 3 for _ in range(3)]
    for a in range(3):
        b, c = (a + 1) % 3, (a + 2) % 3
        blocks[a][c] = fwd_diff[b]
        blocks[a][b] = -fwd_diff[c]
    C_full = sp.bmat(blocks, format="csr")
    # edges -> faces: forward average along a, backward averages across
    P_full = sp.block_diag(
        [fwd_avg[a] @ bwd_avg[(a + 1) % 3] @ bwd_avg[(a + 2) % 3] for a in range(3)],
        format="csr",
    )
    R_full = P_full @ C_full

    flat_cells = cell_mask.ravel()
    face_index = []
    for axis in range(3):
        active = cell_mask & np.roll(cell_mask, -1, axis=axis)
        face_index.append(np.flatnonzero(active.ravel()))
    cell_index = np.flatnonzero(flat_cells)
    face_select = np.concatenate([axis * n_total + idx for axis, idx in enumerate(face_index)])

    G = _restrict(G_full, face_select, cell_index)
    A = _restrict(A_full, face_select, face_select)
    R = _restrict(R_full, face_select, face_select)
    component_laplacians = tuple(
        _restrict(laplacian, idx, idx) for idx in face_index
    )
    n_faces = len(face_select)

    logger.debug(
        "operators bc=%s grid=%s active faces=%d fluid cells=%d",
        bc.value, shape, n_faces, len(cell_index),
    )
    return DiscreteOperatorSet(
        geometry=geom,
        bc=bc,
        full_shape=shape,
        spacings=spacings,
        face_index=tuple(face_index),
        cell_index=cell_index,
        G=G,
        D=(-G.T).tocsr(),
        A=A,
        R=R,
        M=sp.diags(np.full(n_faces, volume)),
        volume=volume,
        component_laplacians=component_laplacians,
    )


_OPERATOR_CACHE: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def operators_for(geom, bc: Optional[BoundaryCondition] = None) -> DiscreteOperatorSet:
    """Cached build_operators; one assembly per geometry object and closure."""
    key_bc = BoundaryCondition(bc if bc is not None else geom.bc)
    per_geom = _OPERATOR_CACHE.setdefault(geom, {})
    if key_bc not in per_geom:
        per_geom[key_bc] = build_operators(geom, key_bc)
    return per_geom[key_bc]


# Field conversion

def from_faces(ops: DiscreteOperatorSet, vector: np.ndarray) -> StaggeredVectorField:
    """Scatter an active-face vector into three component arrays."""
    vector = np.asarray(vector, dtype=float)
    n_total = int(np.prod(ops.full_shape))
    crop = _crop(ops)
    components = []
    for axis, part in enumerate(ops.face_slices):
        full = np.zeros(n_total)
        full[ops.face_index[axis]] = vector[part]
        components.append(full.reshape(ops.full_shape)[crop].copy())
    return StaggeredVectorField(tuple(components), ops.spacings, ops.geometry)


def to_faces(ops: DiscreteOperatorSet, field_: StaggeredVectorField) -> np.ndarray:
    """Gather the active-face values of a field; inactive values are discarded."""
    crop = _crop(ops)
    parts = []
    for axis in range(3):
        full = np.zeros(ops.full_shape)
        full[crop] = field_.components[axis]
        parts.append(full.ravel()[ops.face_index[axis]])
    return np.concatenate(parts)


def from_cells(ops: DiscreteOperatorSet, vector: np.ndarray, mean_zero: bool = False) -> CenterScalarField:
    full = np.zeros(int(np.prod(ops.full_shape)))
    full[ops.cell_index] = vector
    crop = _crop(ops)
    values = full.reshape(ops.full_shape)[crop].copy()
    mask = np.asarray(ops.geometry.cell_mask)
    return CenterScalarField(values, mask, ops.geometry, mean_zero=mean_zero)


def to_cells(ops: DiscreteOperatorSet, field_: CenterScalarField) -> np.ndarray:
    full = np.zeros(ops.full_shape)
    full[_crop(ops)] = field_.values
    return full.ravel()[ops.cell_index]


def sample_faces(
    ops: DiscreteOperatorSet,
    functions: Sequence[Optional[Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]]],
) -> np.ndarray:
    """Evaluate one callable per component at its face centers (None means zero)."""
    components = []
    for axis, fn in enumerate(functions):
        if fn is None:
            components.append(np.zeros(ops.domain_shape))
        else:
            X0, X1, X2 = ops.geometry.face_centers(axis)
            components.append(np.broadcast_to(fn(X0, X1, X2), ops.domain_shape).astype(float))
    return to_faces(ops, StaggeredVectorField(tuple(components), ops.spacings, ops.geometry))


def constant_faces(ops: DiscreteOperatorSet, value: Sequence[float]) -> np.ndarray:
    return np.concatenate([
        np.full(len(ops.face_index[axis]), float(value[axis])) for axis in range(3)
    ])


# Energies and pairings

def _check_same(ops: DiscreteOperatorSet, *fields) -> None:
    for f in fields:
        if isinstance(f, StaggeredVectorField) and f.geometry is not ops.geometry:
            raise GeometryMismatch("fields live on different geometries")


def _as_vector(ops, a) -> np.ndarray:
    return to_faces(ops, a) if isinstance(a, StaggeredVectorField) else np.asarray(a, dtype=float)


def rot_energy_pairing(a, b, ops: Optional[DiscreteOperatorSet] = None) -> float:
    """<R a, b>_M for two face fields on the same geometry.

    Equals <a, R^T b>_M exactly since the microrotation equation uses R^T.
    """
    if ops is None:
        if not isinstance(a, StaggeredVectorField):
            raise InvalidParameter("plain vectors need an explicit operator set")
        ops = operators_for(a.geometry)
    if isinstance(a, StaggeredVectorField) and isinstance(b, StaggeredVectorField) and a.geometry is not b.geometry:
        raise GeometryMismatch("rot pairing of fields on different geometries")
    _check_same(ops, a, b)
    va, vb = _as_vector(ops, a), _as_vector(ops, b)
    if va.shape != vb.shape or va.shape[0] != ops.n_faces:
        raise GeometryMismatch("field sizes do not match the active faces")
    return float(ops.volume * np.dot(ops.R @ va, vb))


def gradient_energy(ops: DiscreteOperatorSet, a) -> float:
    """<A a, a>_M, the discrete squared L2 norm of the gradient."""
    _check_same(ops, a)
    va = _as_vector(ops, a)
    return float(ops.volume * np.dot(ops.A @ va, va))


def mass_norm(ops: DiscreteOperatorSet, a) -> float:
    _check_same(ops, a)
    va = _as_vector(ops, a)
    return float(np.sqrt(ops.volume * np.dot(va, va)))


def divergence_norm(ops: DiscreteOperatorSet, a) -> float:
    va = _as_vector(ops, a)
    div = ops.D @ va
    return float(np.sqrt(ops.volume * np.dot(div, div)))


def project_divergence_free(ops: DiscreteOperatorSet, a):
    """Discrete Leray projection a - G phi with D(a - G phi) = 0.

    Assumes a connected fluid region (one pressure constant).
    """
    _check_same(ops, a)
    va = _as_vector(ops, a)
    rhs = ops.G.T @ va
    phi = np.zeros(ops.n_cells)
    phi[1:] = ops._pressure_poisson.solve(rhs[1:])
    projected = va - ops.G @ phi
    if isinstance(a, StaggeredVectorField):
        return from_faces(ops, projected)
    return projected
