"""
Result writers: permeability JSON, macro CSV, legacy VTK, MatrixMarket,
scaling tables and the run report with its file manifest.
"""
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
import pyvista as pv
import scipy.io

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))
from config import get_output_path

from src.homogenization.cell import PermeabilitySet
from src.utils.errors import InputFileError
from src.utils.helpers import ensure_output_directory, file_sha256

logger = logging.getLogger(__name__)


def permeability_filename(perm) -> str:
    """Cache file name for a PermeabilitySet or a bare cache key."""
    key = perm.cache_key if isinstance(perm, PermeabilitySet) else str(perm)
    return f"permeability_{key}.json"


def write_permeability(perm: PermeabilitySet, output_dir=None) -> Path:
    """Write the permeability set as sorted JSON (no timestamps, bitwise reproducible)."""
    path = get_output_path(permeability_filename(perm), output_dir)
    text = json.dumps(perm.to_dict(), sort_keys=True, indent=2)
    path.write_text(text + "\n", encoding="utf-8")
    logger.info("permeability written to %s", path)
    return path


def read_permeability(path) -> PermeabilitySet:
    path = Path(path)
    if not path.is_file():
        raise InputFileError(f"permeability file not found: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise InputFileError(f"permeability file {path} is not valid JSON: {e}")
    return PermeabilitySet.from_dict(payload)


def write_macro_csv(solution, path) -> Path:
    """Columns z1, z2, p, U1, U2, W1, W2."""
    path = Path(path)
    ensure_output_directory(path.parent)
    solution.to_frame().to_csv(path, index=False, float_format="%.17g")
    return path


def write_vtk_structured_points(
    path,
    dimensions: Sequence[int],
    origin: Sequence[float],
    spacing: Sequence[float],
    scalars: Optional[Mapping[str, np.ndarray]] = None,
    vectors: Optional[Mapping[str, np.ndarray]] = None,
) -> Path:
    """Legacy ASCII VTK file (STRUCTURED_POINTS) with point data.

    Arrays are indexed [i, j, k] on a 3D (or [i, j] on a 2D) grid and VTK
    expects the first index to vary fastest, so they are flattened in Fortran
    order. Vector arrays carry their components on the leading axis and are
    padded to three components.
    """
    path = Path(path)
    ensure_output_directory(path.parent)
    dims = tuple(int(d) for d in dimensions) + (1,) * (3 - len(dimensions))
    grid = pv.ImageData(
        dimensions=dims,
        origin=tuple(float(o) for o in origin) + (0.0,) * (3 - len(origin)),
        spacing=tuple(float(s) for s in spacing) + (1.0,) * (3 - len(spacing)),
    )
    count = grid.n_points
    for name, values in (scalars or {}).items():
        grid.point_data[name] = np.asarray(values, dtype=float).ravel(order="F")
    for name, values in (vectors or {}).items():
        data = np.asarray(values, dtype=float)
        columns = np.zeros((count, 3))
        for c in range(data.shape[0]):
            columns[:, c] = data[c].ravel(order="F")
        grid.point_data[name] = columns
    grid.save(str(path), binary=False)
    return path


def write_macro_vtk(solution, path) -> Path:
    problem = solution.problem
    h1, h2 = problem.spacing
    return write_vtk_structured_points(
        path,
        problem.grid,
        (0.5 * h1, 0.5 * h2),
        (h1, h2),
        scalars={"p": solution.p},
        vectors={"U": solution.U_prime, "W": solution.W_prime},
    )


def write_geometry_vtk(geom, path) -> Path:
    """Fluid mask (1 fluid, 0 solid) at cell centers of a cell or thin-domain geometry."""
    X0, X1, X2 = geom.cell_centers()
    return write_vtk_structured_points(
        path,
        geom.grid_shape,
        (float(X0[0, 0, 0]), float(X1[0, 0, 0]), float(X2[0, 0, 0])),
        geom.spacings,
        scalars={"fluid": geom.cell_mask.astype(float)},
    )


def write_matrix_market(matrix, path, comment: str = "") -> Path:
    path = Path(path)
    ensure_output_directory(path.parent)
    scipy.io.mmwrite(str(path), matrix, comment=comment)
    # scipy appends the extension when missing
    return path if path.suffix == ".mtx" else path.with_name(path.name + ".mtx")


def write_scaling_csv(report, path) -> Path:
    path = Path(path)
    ensure_output_directory(path.parent)
    report.table.to_csv(path, index=False, float_format="%.17g")
    return path


def write_table_csv(table: pd.DataFrame, path) -> Path:
    path = Path(path)
    ensure_output_directory(path.parent)
    table.to_csv(path, index=False, float_format="%.17g")
    return path


def build_manifest(paths: Iterable[Path], root: Optional[Path] = None) -> List[Dict[str, Any]]:
    manifest = []
    for path in sorted({Path(p) for p in paths}):
        name = str(path.relative_to(root)) if root is not None and path.is_relative_to(root) else str(path)
        manifest.append({"file": name, "sha256": file_sha256(path), "bytes": path.stat().st_size})
    return manifest


def write_report(report: Dict[str, Any], path, files: Iterable[Path] = ()) -> Path:
    """Run report as JSON with a content-hash manifest of every emitted file."""
    path = Path(path)
    ensure_output_directory(path.parent)
    payload = dict(report)
    payload["files"] = build_manifest(files, root=path.parent)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2, default=_json_default) + "\n", encoding="utf-8")
    logger.info("report written to %s", path)
    return path


def _json_default(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")
