"""
Darcy module.
Homogenized 2D problem on the rectangle omega = (0, L1) x (0, L2):

    div( K1 (f' - grad p) + K2 g' ) = 0 in omega,  zero normal flux on the boundary,

solved for a mean-zero cell-centered pressure with finite volumes, plus the
averaged fields U' = K1 (f' - grad p) + K2 g', W' = L1 (f' - grad p) + L2 g'
and the two-scale reconstruction from the cell solutions.

Diagonal permeability terms use the two-point face gradients; the off-diagonal
terms use gradients at interior vertices averaged over the four neighbouring
cells. Loads are discretized with the same stencils, so a constant force is
absorbed by the pressure exactly.
"""
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.sparse.linalg import cg, splu

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))
from config import get_config

from src.grid.operators import StaggeredVectorField
from src.homogenization.cell import MicropolarCellSolution, PermeabilitySet, cell_quadrature
from src.utils.errors import (
    InconsistentInputs,
    InputFileError,
    InvalidParameter,
    NoConvergence,
    NotPositiveDefinite,
)

logger = logging.getLogger(__name__)

ForceFunction = Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]
FORCE_PRESETS = ("zero", "constant", "gradient_cosine", "solenoidal_sine")


def force_preset(
    name: str,
    value: Sequence[float] = (1.0, 0.0),
    extent: Sequence[float] = (1.0, 1.0),
) -> ForceFunction:
    """Named analytic in-plane force fields.

    ``constant`` uses ``value``; ``gradient_cosine`` is grad q with
    q = cos(pi z1/L1) cos(pi z2/L2); ``solenoidal_sine`` is (sin(pi z2/L2), 0).
    """
    L1, L2 = float(extent[0]), float(extent[1])
    if name == "zero":
        return lambda z1, z2: (np.zeros_like(z1), np.zeros_like(z2))
    if name == "constant":
        a, b = float(value[0]), float(value[1])
        return lambda z1, z2: (np.full_like(z1, a), np.full_like(z2, b))
    if name == "gradient_cosine":
        k1, k2 = np.pi / L1, np.pi / L2
        return lambda z1, z2: (
            -k1 * np.sin(k1 * z1) * np.cos(k2 * z2),
            -k2 * np.cos(k1 * z1) * np.sin(k2 * z2),
        )
    if name == "solenoidal_sine":
        k2 = np.pi / L2
        return lambda z1, z2: (np.sin(k2 * z2), np.zeros_like(z1))
    raise InvalidParameter(f"unknown force preset '{name}' (expected one of {', '.join(FORCE_PRESETS)})")


def cell_centers_2d(extent: Sequence[float], grid: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    z1 = (np.arange(grid[0]) + 0.5) * extent[0] / grid[0]
    z2 = (np.arange(grid[1]) + 0.5) * extent[1] / grid[1]
    return np.meshgrid(z1, z2, indexing="ij")


def load_force_csv(path, grid: Sequence[int], extent: Sequence[float], name: str = "f") -> np.ndarray:
    """Read samples z1, z2, <name>1, <name>2 given at the cell centers of the grid.

    Returns:
        Array of shape (2, n1, n2).
    """
    path = Path(path)
    if not path.exists():
        raise InputFileError(f"force file not found: {path}")
    try:
        frame = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise InputFileError(f"cannot parse force file {path}: {e}")
    columns = ["z1", "z2", f"{name}1", f"{name}2"]
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise InputFileError(f"force file {path} lacks columns {missing}")

    n1, n2 = int(grid[0]), int(grid[1])
    h1, h2 = extent[0] / n1, extent[1] / n2
    i1 = np.rint(frame["z1"].to_numpy() / h1 - 0.5).astype(int)
    i2 = np.rint(frame["z2"].to_numpy() / h2 - 0.5).astype(int)
    off_grid = (np.abs(frame["z1"].to_numpy() - (i1 + 0.5) * h1) > 1e-9 * extent[0]) | (
        np.abs(frame["z2"].to_numpy() - (i2 + 0.5) * h2) > 1e-9 * extent[1]
    )
    if off_grid.any() or i1.min() < 0 or i2.min() < 0 or i1.max() >= n1 or i2.max() >= n2:
        raise InputFileError(f"force file {path} has samples off the {n1}x{n2} cell centers")
    values = np.full((2, n1, n2), np.nan)
    values[0, i1, i2] = frame[f"{name}1"].to_numpy(dtype=float)
    values[1, i1, i2] = frame[f"{name}2"].to_numpy(dtype=float)
    if not np.isfinite(values).all():
        raise InputFileError(f"force file {path} does not cover every cell with finite values")
    return values


@dataclass
class MacroProblem:
    """Darcy problem data; forces are sampled at cell centers, shape (2, n1, n2)."""
    extent: Tuple[float, float]
    grid: Tuple[int, int]
    f_prime: np.ndarray
    g_prime: np.ndarray
    perm: PermeabilitySet
    sources: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.extent = (float(self.extent[0]), float(self.extent[1]))
        self.grid = (int(self.grid[0]), int(self.grid[1]))
        if min(self.grid) < 4:
            raise InvalidParameter(f"macro grid {self.grid} needs at least 4 cells per axis")
        if min(self.extent) <= 0:
            raise InvalidParameter("omega extents must be positive")
        for name in ("f_prime", "g_prime"):
            data = np.asarray(getattr(self, name), dtype=float)
            if data.shape != (2,) + self.grid:
                raise InvalidParameter(f"{name} has shape {data.shape}, expected {(2,) + self.grid}")
            if not np.isfinite(data).all():
                raise InvalidParameter(f"{name} contains non-finite values")
            setattr(self, name, data)

    @property
    def spacing(self) -> Tuple[float, float]:
        return (self.extent[0] / self.grid[0], self.extent[1] / self.grid[1])

    def centers(self) -> Tuple[np.ndarray, np.ndarray]:
        return cell_centers_2d(self.extent, self.grid)

    @classmethod
    def from_presets(
        cls,
        perm: PermeabilitySet,
        extent: Sequence[float] = (1.0, 1.0),
        grid: Sequence[int] = (64, 64),
        f_preset: str = "solenoidal_sine",
        g_preset: str = "zero",
        f_value: Sequence[float] = (1.0, 0.0),
        g_value: Sequence[float] = (0.0, 0.0),
    ) -> "MacroProblem":
        z1, z2 = cell_centers_2d(extent, grid)
        f = np.stack(force_preset(f_preset, f_value, extent)(z1, z2))
        g = np.stack(force_preset(g_preset, g_value, extent)(z1, z2))
        return cls(tuple(extent), tuple(grid), f, g, perm, sources={"f": f_preset, "g": g_preset})


@dataclass
class MacroSolution:
    p: np.ndarray
    U_prime: np.ndarray
    W_prime: np.ndarray
    grad_p: np.ndarray
    problem: MacroProblem
    residuals: Dict[str, float] = field(default_factory=dict)
    iterations: int = 0
    wall_time: float = 0.0

    def to_frame(self) -> pd.DataFrame:
        """Columns z1, z2, p, U1, U2, W1, W2 in row-major cell order."""
        z1, z2 = self.problem.centers()
        return pd.DataFrame({
            "z1": z1.ravel(),
            "z2": z2.ravel(),
            "p": self.p.ravel(),
            "U1": self.U_prime[0].ravel(),
            "U2": self.U_prime[1].ravel(),
            "W1": self.W_prime[0].ravel(),
            "W2": self.W_prime[1].ravel(),
        })


def _difference(n: int, h: float) -> sp.csr_matrix:
    return sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n), format="csr") / h


def _average(n: int) -> sp.csr_matrix:
    return sp.diags([np.full(n - 1, 0.5), np.full(n - 1, 0.5)], [0, 1], shape=(n - 1, n), format="csr")


@dataclass(frozen=True, eq=False)
class _Stencils:
    Gx: sp.csr_matrix
    Gy: sp.csr_matrix
    Vx: sp.csr_matrix
    Vy: sp.csr_matrix
    to_xfaces: sp.csr_matrix
    to_yfaces: sp.csr_matrix
    to_vertices: sp.csr_matrix
    area: float


def _stencils(problem: MacroProblem) -> _Stencils:
    (n1, n2), (h1, h2) = problem.grid, problem.spacing
    d1, d2 = _difference(n1, h1), _difference(n2, h2)
    a1, a2 = _average(n1), _average(n2)
    I1, I2 = sp.identity(n1, format="csr"), sp.identity(n2, format="csr")
    return _Stencils(
        Gx=sp.kron(d1, I2, format="csr"),
        Gy=sp.kron(I1, d2, format="csr"),
        Vx=sp.kron(d1, a2, format="csr"),
        Vy=sp.kron(a1, d2, format="csr"),
        to_xfaces=sp.kron(a1, I2, format="csr"),
        to_yfaces=sp.kron(I1, a2, format="csr"),
        to_vertices=sp.kron(a1, a2, format="csr"),
        area=h1 * h2,
    )


def _stiffness(st: _Stencils, K: np.ndarray) -> sp.csr_matrix:
    cross = st.Vx.T @ st.Vy + st.Vy.T @ st.Vx
    return (st.area * (K[0, 0] * (st.Gx.T @ st.Gx) + K[1, 1] * (st.Gy.T @ st.Gy) + K[0, 1] * cross)).tocsr()


def _load(st: _Stencils, B: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Discrete int (B v) . grad(phi) with the stencils of the stiffness matrix."""
    v1, v2 = v[0].ravel(), v[1].ravel()
    return st.area * (
        st.Gx.T @ (B[0, 0] * (st.to_xfaces @ v1))
        + st.Gy.T @ (B[1, 1] * (st.to_yfaces @ v2))
        + st.Vx.T @ (B[0, 1] * (st.to_vertices @ v2))
        + st.Vy.T @ (B[1, 0] * (st.to_vertices @ v1))
    )


def _check_positive_definite(K1: np.ndarray) -> np.ndarray:
    sym = 0.5 * (K1 + K1.T)
    eigenvalues = np.linalg.eigvalsh(sym)
    if eigenvalues.min() <= 0.0:
        raise NotPositiveDefinite(f"K1 is not positive definite (eigenvalues {eigenvalues.tolist()})")
    return sym


def _discretize(problem: MacroProblem) -> Tuple[_Stencils, sp.csr_matrix, np.ndarray]:
    """Stiffness matrix and load vector; the symmetric part of K1 enters the stiffness."""
    K1 = _check_positive_definite(np.asarray(problem.perm.K1, dtype=float))
    st = _stencils(problem)
    S = _stiffness(st, K1)
    b = _load(st, K1, problem.f_prime) + _load(st, np.asarray(problem.perm.K2, dtype=float), problem.g_prime)
    return st, S, b


def solve_darcy(problem: MacroProblem, tol: Optional[float] = None, method: str = "cg") -> MacroSolution:
    """Solve the Neumann Darcy problem for a mean-zero pressure.

    Args:
        problem: Grid, forces and permeability matrices.
        tol: Relative CG residual tolerance; defaults to the configured value.
        method: ``cg`` (default) or ``direct`` (sparse LU with one pinned cell,
            used for fine reference grids).

    Returns:
        MacroSolution with pressure, averaged fields and flux residuals.
    """
    tol = get_config().solver.darcy_tol if tol is None else float(tol)
    perm = problem.perm
    K1 = np.asarray(perm.K1, dtype=float)
    st, S, b = _discretize(problem)
    n = S.shape[0]

    start = time.perf_counter()
    iterations = 0
    if not np.any(b):
        p = np.zeros(n)
    elif method == "direct":
        p = np.zeros(n)
        p[1:] = splu(S[1:, 1:].tocsc()).solve(b[1:])
    elif method == "cg":
        counter = {"iterations": 0}

        def count(_):
            counter["iterations"] += 1

        b_norm = float(np.linalg.norm(b))
        max_iter = max(n, 1000)
        p, info = cg(S, b, rtol=tol, maxiter=max_iter, callback=count)
        iterations = counter["iterations"]
        residual = float(np.linalg.norm(b - S @ p)) / b_norm
        if info != 0 and residual > tol:
            raise NoConvergence(
                f"CG reached relative residual {residual:.3e} after {iterations} iterations",
                best=p,
            )
    else:
        raise InvalidParameter(f"unknown Darcy solve method '{method}'")
    p = p - p.mean()
    wall_time = time.perf_counter() - start

    shape = problem.grid
    pressure = p.reshape(shape)
    grad_p = np.stack(np.gradient(pressure, *problem.spacing, edge_order=2))
    drive = problem.f_prime - grad_p
    U = np.einsum("ij,jab->iab", K1, drive) + np.einsum("ij,jab->iab", perm.K2, problem.g_prime)
    W = np.einsum("ij,jab->iab", perm.L1, drive) + np.einsum("ij,jab->iab", perm.L2, problem.g_prime)

    solution = MacroSolution(
        p=pressure,
        U_prime=U,
        W_prime=W,
        grad_p=grad_p,
        problem=problem,
        iterations=iterations,
        wall_time=wall_time,
    )
    solution.residuals = flux_residuals(problem, solution)
    logger.info(
        "darcy %dx%d solved: iterations=%d residual=%.2e",
        shape[0], shape[1], iterations, solution.residuals["relative_residual"],
    )
    return solution


def boundary_normal_flux(U_prime: np.ndarray) -> np.ndarray:
    """Normal component of U' on the four sides of omega.

    Cell-centered values are extrapolated to the boundary faces at second
    order. Returns the stacked values in the order left, right, bottom, top.
    """
    U1, U2 = U_prime[0], U_prime[1]
    left = 1.5 * U1[0] - 0.5 * U1[1]
    right = 1.5 * U1[-1] - 0.5 * U1[-2]
    bottom = 1.5 * U2[:, 0] - 0.5 * U2[:, 1]
    top = 1.5 * U2[:, -1] - 0.5 * U2[:, -2]
    return np.concatenate([-left, right, -bottom, top])


def flux_residuals(problem: MacroProblem, solution: MacroSolution) -> Dict[str, float]:
    """Discrete flux balance of a solution.

    Interior divergence is the per-cell residual divided by the cell area.
    The boundary entry is the largest extrapolated normal velocity on the
    sides of omega, which vanishes as the grid is refined.
    """
    st, S, b = _discretize(problem)
    r = b - S @ solution.p.ravel()
    b_norm = float(np.linalg.norm(b))
    return {
        "interior_divergence_max": float(np.abs(r).max() / st.area),
        "relative_residual": float(np.linalg.norm(r) / b_norm) if b_norm > 0 else 0.0,
        "boundary_flux_max": float(np.abs(boundary_normal_flux(solution.U_prime)).max()),
        "global_balance": float(abs(r.sum())),
        "pressure_mean": float(solution.p.mean()),
    }


class TwoScaleEvaluator:
    """Evaluate u_hat, w_hat, pi_hat from the identification

        u_hat(z, y) = sum_j (f_j - d_j p)(z) u^{j,1}(y) + g_j(z) u^{j,2}(y)

    and likewise for the microrotation and the pressure.
    """

    def __init__(self, cell_solutions: Mapping[Tuple[int, int], MicropolarCellSolution], macro: MacroSolution):
        self.cells = cell_solutions
        self.macro = macro
        self.drive = macro.problem.f_prime - macro.grad_p
        self.g = macro.problem.g_prime
        self.geometry = cell_solutions[(1, 1)].geometry

    def coefficients(self, index: Tuple[int, int]) -> Dict[Tuple[int, int], float]:
        i1, i2 = index
        return {
            (j, 1): float(self.drive[j - 1, i1, i2]) for j in (1, 2)
        } | {
            (j, 2): float(self.g[j - 1, i1, i2]) for j in (1, 2)
        }

    def _combine(self, index, attribute: str):
        weights = self.coefficients(index)
        if attribute == "pi":
            return sum(c * self.cells[key].pi.values for key, c in weights.items())
        return tuple(
            sum(c * getattr(self.cells[key], attribute).components[axis] for key, c in weights.items())
            for axis in range(3)
        )

    def velocity(self, index: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self._combine(index, "u")

    def microrotation(self, index: Tuple[int, int]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self._combine(index, "w")

    def pressure(self, index: Tuple[int, int]) -> np.ndarray:
        return self._combine(index, "pi")

    def cell_average(self, index: Tuple[int, int], which: str = "u") -> np.ndarray:
        """Y_f-integrals of the three components of u_hat (or w_hat) at one macro cell."""
        components = self.velocity(index) if which == "u" else self.microrotation(index)
        field_ = StaggeredVectorField(components, self.geometry.spacings, self.geometry)
        return np.array([cell_quadrature(field_, axis) for axis in range(3)])

    def macro_index(self, z: Sequence[float]) -> Tuple[int, int]:
        problem = self.macro.problem
        h1, h2 = problem.spacing
        i1 = min(int(np.floor(z[0] / h1)), problem.grid[0] - 1)
        i2 = min(int(np.floor(z[1] / h2)), problem.grid[1] - 1)
        if i1 < 0 or i2 < 0:
            raise InvalidParameter(f"point {tuple(z)} lies outside omega")
        return i1, i2

    def __call__(self, z: Sequence[float], y: Sequence[float]):
        """Values at macro point z and the reference-cell grid location containing y."""
        index = self.macro_index(z)
        n = self.geometry.n
        j = tuple(min(int(np.floor((float(c) + 0.5) * n)), n - 1) for c in y)
        u = np.array([c[j] for c in self.velocity(index)])
        w = np.array([c[j] for c in self.microrotation(index)])
        pi = float(self.pressure(index)[j])
        return u, w, pi


def reconstruct_two_scale(
    cell_solutions: Mapping[Tuple[int, int], MicropolarCellSolution],
    macro: MacroSolution,
    problem: Optional[MacroProblem] = None,
) -> TwoScaleEvaluator:
    """Build the two-scale evaluator; the cell solutions must match the macro permeability."""
    problem = problem or macro.problem
    if problem is not macro.problem:
        raise InconsistentInputs("macro solution was computed for a different problem")
    missing = [key for key in ((1, 1), (2, 1), (1, 2), (2, 2)) if key not in cell_solutions]
    if missing:
        raise InconsistentInputs(f"missing cell problems {missing}")
    first = cell_solutions[(1, 1)]
    if first.params != problem.perm.params:
        raise InconsistentInputs("cell solutions and permeability use different physical parameters")
    if first.geometry.to_dict() != problem.perm.geometry:
        raise InconsistentInputs("cell solutions and permeability use different cell geometries")
    return TwoScaleEvaluator(cell_solutions, macro)


def darcy_problem_from_config(perm: PermeabilitySet, macro_config: Any) -> MacroProblem:
    """MacroProblem from a macro configuration section (presets or CSV files)."""
    extent = tuple(macro_config.extent)
    grid = tuple(macro_config.grid)
    z1, z2 = cell_centers_2d(extent, grid)
    forces = {}
    sources = {}
    for name in ("f", "g"):
        csv_path = getattr(macro_config, f"{name}_csv", None)
        if csv_path:
            forces[name] = load_force_csv(csv_path, grid, extent, name=name)
            sources[name] = str(csv_path)
        else:
            preset = getattr(macro_config, f"{name}_preset")
            value = getattr(macro_config, f"{name}_value")
            forces[name] = np.stack(force_preset(preset, value, extent)(z1, z2))
            sources[name] = preset
    return MacroProblem(extent, grid, forces["f"], forces["g"], perm, sources=sources)
