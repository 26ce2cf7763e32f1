"""
Voxel geometries and staggered-grid operators.
"""

from .geometry import (
    ObstacleKind,
    ObstacleSpec,
    CellGeometry,
    ThinDomainGeometry,
    build_cell_geometry,
    build_open_cell,
    build_thin_domain,
)
from .operators import (
    BoundaryCondition,
    DiscreteOperatorSet,
    StaggeredVectorField,
    CenterScalarField,
    build_operators,
)

__all__ = [
    "ObstacleKind",
    "ObstacleSpec",
    "CellGeometry",
    "ThinDomainGeometry",
    "build_cell_geometry",
    "build_open_cell",
    "build_thin_domain",
    "BoundaryCondition",
    "DiscreteOperatorSet",
    "StaggeredVectorField",
    "CenterScalarField",
    "build_operators"
]
