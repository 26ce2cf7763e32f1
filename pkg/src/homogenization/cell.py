"""
Cell module.
Local micropolar problems on the periodic reference cell and the effective
2x2 matrices built from their Y_f-averages:

    (K_k)_ij = int_{Y_f} u^{j,k}_i dy,    (L_k)_ij = int_{Y_f} w^{j,k}_i dy

Problem (i, k) forces the velocity equation (k=1) or the microrotation
equation (k=2) with the in-plane unit vector e_i; for i=3 the forcing vanishes.
"""
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))
from config import get_config

from src.grid.geometry import CellGeometry, ObstacleSpec, build_cell_geometry
from src.grid.operators import (
    BoundaryCondition,
    CenterScalarField,
    StaggeredVectorField,
    from_cells,
    from_faces,
)
from src.solvers.saddle_solver import (
    MicropolarSystem,
    PhysicalParams,
    SolveStats,
    assemble,
    assemble_stokes,
    solve,
)
from src.utils.errors import InconsistentInputs, InvalidParameter, InvariantViolation
from src.utils.helpers import fingerprint

logger = logging.getLogger(__name__)

CELL_PROBLEMS: Tuple[Tuple[int, int], ...] = ((1, 1), (2, 1), (3, 1), (1, 2), (2, 2), (3, 2))
SYMMETRY_TOL = 1e-8


@dataclass
class MicropolarCellSolution:
    i: int
    k: int
    u: StaggeredVectorField
    w: StaggeredVectorField
    pi: CenterScalarField
    stats: SolveStats
    params: PhysicalParams
    geometry: CellGeometry

    def average(self, which: str = "u") -> np.ndarray:
        """Y_f-integrals of the three components of ``u`` or ``w``."""
        field_ = self.u if which == "u" else self.w
        return np.array([cell_quadrature(field_, axis) for axis in range(3)])

    def norm(self) -> float:
        vol = self.geometry.cell_volume
        total = sum(float(np.sum(c ** 2)) for c in self.u.components + self.w.components)
        return float(np.sqrt(vol * total))


def permeability_cache_key(geometry: Mapping[str, Any], params: PhysicalParams, tol: float) -> str:
    """Hash of everything a permeability set depends on; names its cache file."""
    return fingerprint({"geometry": dict(geometry), "params": params.to_dict(), "tol": float(tol)})


@dataclass
class PermeabilitySet:
    K1: np.ndarray
    K2: np.ndarray
    L1: np.ndarray
    L2: np.ndarray
    params: PhysicalParams
    geometry: Dict[str, Any]
    tol: float
    residuals: Dict[str, float] = field(default_factory=dict)

    @property
    def geometry_fingerprint(self) -> str:
        return fingerprint({"geometry": self.geometry})

    @property
    def cache_key(self) -> str:
        return permeability_cache_key(self.geometry, self.params, self.tol)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "params": self.params.to_dict(),
            "geometry": dict(self.geometry),
            "matrices": {
                name: [[float(v) for v in row] for row in getattr(self, name)]
                for name in ("K1", "K2", "L1", "L2")
            },
            "tol": self.tol,
            "residuals": {key: float(value) for key, value in self.residuals.items()},
            "fingerprint": self.cache_key,
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "PermeabilitySet":
        try:
            matrices = payload["matrices"]
            params = payload["params"]
            return cls(
                K1=np.array(matrices["K1"], dtype=float),
                K2=np.array(matrices["K2"], dtype=float),
                L1=np.array(matrices["L1"], dtype=float),
                L2=np.array(matrices["L2"], dtype=float),
                params=PhysicalParams(N2=params["N2"], Rc=params["Rc"]),
                geometry=dict(payload.get("geometry", {})),
                tol=float(payload.get("tol", 0.0)),
                residuals=dict(payload.get("residuals", {})),
            )
        except (KeyError, TypeError) as e:
            raise InconsistentInputs(f"permeability data is missing field {e}")


def cell_quadrature(field_: StaggeredVectorField, axis: int) -> float:
    """Face values averaged to cell centers, then summed with cell volumes."""
    faces = field_.components[axis]
    cells = 0.5 * (faces + np.roll(faces, 1, axis=axis))
    return float(cells.sum() * np.prod(field_.spacings))


def cell_rhs(system: MicropolarSystem, i: int) -> np.ndarray:
    """Face load of the unit force e_i (zero for i=3)."""
    ops = system.operators
    rhs = np.zeros(ops.n_faces)
    if i in (1, 2):
        rhs[ops.face_slices[i - 1]] = ops.volume
    return rhs


def _check_problem(geom, i: int, k: int) -> None:
    if not getattr(geom, "periodic", False):
        raise InvalidParameter("cell problems need a periodic cell geometry")
    if i not in (1, 2, 3) or k not in (1, 2):
        raise InvalidParameter(f"cell problem (i={i}, k={k}) outside {{1,2,3}} x {{1,2}}")


def solve_cell_problem(
    geom: CellGeometry,
    params: PhysicalParams,
    i: int,
    k: int,
    tol: Optional[float] = None,
    system: Optional[MicropolarSystem] = None,
    max_iter: Optional[int] = None,
    preconditioner: Optional[str] = None,
) -> MicropolarCellSolution:
    """Solve local problem (i, k) on ``geom``.

    Args:
        geom: Periodic cell geometry with a nonempty obstacle.
        params: Coupling number and microrotation number.
        i: Force direction (1, 2 or 3).
        k: 1 forces the velocity equation, 2 the microrotation equation.
        tol: Relative solver tolerance; defaults to the configured value.
        system: Pre-assembled system to share between the six problems.
        max_iter: MINRES iteration cap; defaults to a multiple of sqrt(dimension).
        preconditioner: lu, jacobi or auto; defaults to the configured kind.

    Returns:
        MicropolarCellSolution with fields on the cell grid.
    """
    _check_problem(geom, i, k)
    tol = get_config().solver.tol if tol is None else tol
    if system is None:
        system = assemble(geom, params, BoundaryCondition.PERIODIC)
    load = cell_rhs(system, i)
    zero = np.zeros(system.n_w)
    rhs_u, rhs_w = (load, zero) if k == 1 else (zero, load)

    u, w, p, stats = solve(system, rhs_u, rhs_w, tol=tol, max_iter=max_iter, preconditioner=preconditioner)
    ops = system.operators
    solution = MicropolarCellSolution(
        i=i,
        k=k,
        u=from_faces(ops, u),
        w=from_faces(ops, w),
        pi=from_cells(ops, p, mean_zero=True),
        stats=stats,
        params=params,
        geometry=geom,
    )
    logger.debug("cell problem (%d,%d): %d iterations, residual %.2e", i, k, stats.iterations, stats.residual)
    return solution


def solve_all_cell_problems(
    geom: CellGeometry,
    params: PhysicalParams,
    tol: Optional[float] = None,
    workers: Optional[int] = None,
    max_iter: Optional[int] = None,
    preconditioner: Optional[str] = None,
) -> Dict[Tuple[int, int], MicropolarCellSolution]:
    """Run the six (i, k) problems concurrently on one shared system.

    Each worker thread factorizes its own preconditioner blocks.
    """
    system = assemble(geom, params, BoundaryCondition.PERIODIC)
    workers = workers or get_config().solver.workers
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = {
            (i, k): pool.submit(solve_cell_problem, geom, params, i, k, tol, system, max_iter, preconditioner)
            for i, k in CELL_PROBLEMS
        }
        return {key: futures[key].result() for key in CELL_PROBLEMS}


def _relative(a: np.ndarray, b: np.ndarray) -> float:
    scale = np.linalg.norm(a)
    return float(np.linalg.norm(a - b) / scale) if scale > 0 else float(np.linalg.norm(a - b))


def compute_permeabilities(
    solutions: Mapping[Tuple[int, int], MicropolarCellSolution] | Iterable[MicropolarCellSolution],
    tol: Optional[float] = None,
    check: bool = True,
) -> PermeabilitySet:
    """Assemble K1, K2, L1, L2 from the cell solutions and check their structure.

    Raises:
        InconsistentInputs: solutions missing, unconverged or from different runs.
        InvariantViolation: a symmetry, definiteness or decoupling check failed.
    """
    if not isinstance(solutions, Mapping):
        solutions = {(s.i, s.k): s for s in solutions}
    missing = [key for key in ((1, 1), (2, 1), (1, 2), (2, 2)) if key not in solutions]
    if missing:
        raise InconsistentInputs(f"missing cell problems {missing}")
    first = solutions[(1, 1)]
    for key, sol in solutions.items():
        if sol.geometry is not first.geometry or sol.params != first.params:
            raise InconsistentInputs(f"cell problem {key} comes from a different geometry or parameter set")
        if not sol.stats.converged:
            raise InconsistentInputs(f"cell problem {key} did not converge")
    tol = get_config().solver.tol if tol is None else tol

    matrices = {}
    for k in (1, 2):
        K = np.zeros((2, 2))
        L = np.zeros((2, 2))
        for j in (1, 2):
            sol = solutions[(j, k)]
            for i in (1, 2):
                K[i - 1, j - 1] = cell_quadrature(sol.u, i - 1)
                L[i - 1, j - 1] = cell_quadrature(sol.w, i - 1)
        matrices[f"K{k}"] = K
        matrices[f"L{k}"] = L
    K1, K2, L1, L2 = matrices["K1"], matrices["K2"], matrices["L1"], matrices["L2"]

    residuals = {
        "K1_symmetry": _relative(K1, K1.T),
        "L2_symmetry": _relative(L2, L2.T),
        "K2_symmetry": _relative(K2, K2.T),
        "K2_minus_L1T": float(np.linalg.norm(K2 - L1.T)),
        "K1_min_eigenvalue": float(np.linalg.eigvalsh(0.5 * (K1 + K1.T)).min()),
        "max_divergence_residual": max(s.stats.divergence_residual for s in solutions.values()),
    }
    if (3, 1) in solutions and (3, 2) in solutions:
        residuals["i3_norm"] = solutions[(3, 1)].norm() + solutions[(3, 2)].norm()

    perm = PermeabilitySet(
        K1=K1, K2=K2, L1=L1, L2=L2,
        params=first.params,
        geometry=first.geometry.to_dict(),
        tol=tol,
        residuals=residuals,
    )
    if check:
        check_permeabilities(perm)
    return perm


def check_permeabilities(perm: PermeabilitySet) -> None:
    res = perm.residuals
    if res["K1_symmetry"] > SYMMETRY_TOL:
        raise InvariantViolation("K1 symmetry", res["K1_symmetry"])
    if res["L2_symmetry"] > SYMMETRY_TOL:
        raise InvariantViolation("L2 symmetry", res["L2_symmetry"])
    if res["K1_min_eigenvalue"] <= 0.0:
        raise InvariantViolation("K1 positive definite", res["K1_min_eigenvalue"])
    if perm.params.N2 == 0.0:
        leak = max(np.abs(perm.K2).max(), np.abs(perm.L1).max())
        if leak > 10 * perm.tol:
            raise InvariantViolation("decoupling at N2=0", float(leak))
    if "i3_norm" in res and res["i3_norm"] > 10 * perm.tol:
        raise InvariantViolation("i=3 triviality", res["i3_norm"])


def vertical_leakage(solutions: Mapping[Tuple[int, int], MicropolarCellSolution]) -> np.ndarray:
    """int_{Y_f} u_3^{j,k} dy as a (k, j) table; dropped by the 2x2 reduction."""
    table = np.zeros((2, 2))
    for k in (1, 2):
        for j in (1, 2):
            table[k - 1, j - 1] = cell_quadrature(solutions[(j, k)].u, 2)
    return table


def permeability_for(
    geom: CellGeometry,
    params: PhysicalParams,
    tol: Optional[float] = None,
    workers: Optional[int] = None,
    max_iter: Optional[int] = None,
    preconditioner: Optional[str] = None,
) -> PermeabilitySet:
    """Convenience wrapper: solve the six problems and assemble the matrices."""
    solutions = solve_all_cell_problems(
        geom, params, tol=tol, workers=workers, max_iter=max_iter, preconditioner=preconditioner
    )
    return compute_permeabilities(solutions, tol=tol)


def stokes_permeability(geom: CellGeometry, tol: Optional[float] = None) -> np.ndarray:
    """Classical 2x2 in-plane Stokes permeability of the same voxel geometry."""
    tol = get_config().solver.tol if tol is None else tol
    system = assemble_stokes(geom, BoundaryCondition.PERIODIC)
    K = np.zeros((2, 2))
    for j in (1, 2):
        u, _, _, _ = solve(system, cell_rhs(system, j), tol=tol)
        field_ = from_faces(system.operators, u)
        for i in (1, 2):
            K[i - 1, j - 1] = cell_quadrature(field_, i - 1)
    return K


def coupling_sweep(
    geom: CellGeometry,
    N2_values: Sequence[float],
    Rc: float,
    tol: Optional[float] = None,
    workers: Optional[int] = None,
) -> pd.DataFrame:
    """K1 and L2 entries over a range of coupling numbers."""
    rows = []
    for N2 in N2_values:
        perm = permeability_for(geom, PhysicalParams(N2=N2, Rc=Rc), tol=tol, workers=workers)
        rows.append({
            "N2": N2,
            "K1_11": perm.K1[0, 0],
            "K1_22": perm.K1[1, 1],
            "K1_12": perm.K1[0, 1],
            "K2_11": perm.K2[0, 0],
            "L1_11": perm.L1[0, 0],
            "L2_11": perm.L2[0, 0],
        })
    return pd.DataFrame(rows)


def resolution_study(
    shape: ObstacleSpec,
    resolutions: Sequence[int],
    params: PhysicalParams,
    tol: Optional[float] = None,
    workers: Optional[int] = None,
) -> pd.DataFrame:
    """K1_11 at increasing n with successive differences and their ratios."""
    rows: List[Dict[str, float]] = []
    for n in resolutions:
        perm = permeability_for(build_cell_geometry(shape, n), params, tol=tol, workers=workers)
        rows.append({"n": n, "K1_11": perm.K1[0, 0], "K1_22": perm.K1[1, 1]})
    table = pd.DataFrame(rows)
    table["difference"] = table["K1_11"].diff().abs()
    table["ratio"] = table["difference"] / table["difference"].shift(1)
    return table
