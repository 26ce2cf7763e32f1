"""
Saddle solver module.
Assembles and solves the symmetric block system of one micropolar Stokes
problem on the active unknowns (u, w, pi):

    [ A          -2 N2 R        G ] [u ]   [f]
    [ -2 N2 R^T  Rc A + 4 N2 I  0 ] [w ] = [g]
    [ G^T        0              0 ] [pi]   [0]

The whole system is multiplied by the cell volume (weak form), so right-hand
sides are face loads, not point values. Solved with preconditioned MINRES.
"""
import logging
import os
import sys
import threading
import time
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, minres, splu

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))
from config import get_config

from src.grid.operators import BoundaryCondition, DiscreteOperatorSet, operators_for
from src.utils.errors import InvalidParameter, NoConvergence, SingularProblem

logger = logging.getLogger(__name__)

PRECONDITIONERS = ("auto", "lu", "jacobi")


@dataclass(frozen=True)
class PhysicalParams:
    """Coupling number N2 in [0, 1) and microrotation number Rc > 0."""
    N2: float
    Rc: float

    def __post_init__(self):
        if not 0.0 <= float(self.N2) < 1.0:
            raise InvalidParameter(f"0 < N2 < 1 required (got N2={self.N2})")
        if not float(self.Rc) > 0.0:
            raise InvalidParameter(f"Rc > 0 required (got Rc={self.Rc})")
        object.__setattr__(self, "N2", float(self.N2))
        object.__setattr__(self, "Rc", float(self.Rc))

    def to_dict(self) -> Dict[str, float]:
        return {"N2": self.N2, "Rc": self.Rc}


@dataclass
class SolveStats:
    iterations: int = 0
    residual: float = 0.0
    wall_time: float = 0.0
    converged: bool = True
    dimension: int = 0
    restarts: int = 0
    preconditioner: str = ""
    divergence_residual: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "iterations": self.iterations,
            "residual": self.residual,
            "wall_time": self.wall_time,
            "converged": self.converged,
            "dimension": self.dimension,
            "restarts": self.restarts,
            "preconditioner": self.preconditioner,
            "divergence_residual": self.divergence_residual,
        }


@dataclass(frozen=True, eq=False)
class MicropolarSystem:
    """Assembled block system. ``n_w`` is zero for the plain Stokes system."""
    operators: DiscreteOperatorSet
    params: Optional[PhysicalParams]
    matrix: sp.csr_matrix
    velocity_block: sp.csr_matrix
    coupling_block: Optional[sp.csr_matrix]
    rotation_block: Optional[sp.csr_matrix]
    pressure_block: sp.csr_matrix
    n_u: int
    n_w: int
    n_p: int
    _local: threading.local = field(default_factory=threading.local, repr=False)

    @property
    def dimension(self) -> int:
        return self.n_u + self.n_w + self.n_p

    @property
    def has_microrotation(self) -> bool:
        return self.n_w > 0

    @property
    def geometry(self):
        return self.operators.geometry

    @property
    def slices(self) -> Tuple[slice, slice, slice]:
        return (
            slice(0, self.n_u),
            slice(self.n_u, self.n_u + self.n_w),
            slice(self.n_u + self.n_w, self.dimension),
        )

    @cached_property
    def _component_blocks(self):
        """Diagonal blocks per velocity/microrotation component (weak form)."""
        ops = self.operators
        vol = ops.volume
        blocks = [vol * lap for lap in ops.component_laplacians]
        if self.has_microrotation:
            Rc, N2 = self.params.Rc, self.params.N2
            for lap in ops.component_laplacians:
                eye = sp.identity(lap.shape[0], format="csr")
                blocks.append(vol * (Rc * lap + 4.0 * N2 * eye))
        return [b.tocsc() for b in blocks]

    def preconditioner(self, kind: str = "auto") -> Tuple[LinearOperator, str]:
        """Block-diagonal SPD preconditioner; returns the operator and the resolved kind."""
        if kind not in PRECONDITIONERS:
            raise InvalidParameter(f"unknown preconditioner '{kind}' (expected one of {PRECONDITIONERS})")
        if kind == "auto":
            largest = max(len(idx) for idx in self.operators.face_index)
            kind = "lu" if largest <= get_config().solver.lu_max_unknowns else "jacobi"
        return self._build_preconditioner(kind), kind

    def _build_preconditioner(self, kind: str) -> LinearOperator:
        # SuperLU handles are not shared between threads; each thread factorizes its own
        cache = self._local.__dict__.setdefault("preconditioners", {})
        if kind in cache:
            return cache[kind]

        bounds = np.cumsum([0] + [b.shape[0] for b in self._component_blocks])
        if kind == "lu":
            solvers = [splu(b).solve for b in self._component_blocks]
        else:
            solvers = [_jacobi(b) for b in self._component_blocks]
        p_slice = self.slices[2]
        inv_vol = 1.0 / self.operators.volume

        def apply(r):
            r = np.asarray(r).ravel()
            z = np.empty_like(r)
            for k, solve_block in enumerate(solvers):
                z[bounds[k]:bounds[k + 1]] = solve_block(r[bounds[k]:bounds[k + 1]])
            rp = r[p_slice]
            z[p_slice] = inv_vol * (rp - rp.mean())
            return z

        operator = LinearOperator(self.matrix.shape, matvec=apply, dtype=float)
        cache[kind] = operator
        return operator


def _jacobi(block):
    inverse_diagonal = 1.0 / block.diagonal()
    return lambda r: inverse_diagonal * r


def _check_solvable(ops: DiscreteOperatorSet) -> None:
    if ops.bc is BoundaryCondition.PERIODIC and not ops.has_dirichlet_faces:
        raise SingularProblem(
            "periodic problem without obstacle: constants lie in the kernel of the velocity block"
        )
    if ops.n_cells == 0 or ops.n_faces == 0:
        raise SingularProblem("geometry has no active unknowns")


def assemble(geom, params: PhysicalParams, bc: Optional[BoundaryCondition] = None) -> MicropolarSystem:
    """Assemble the micropolar saddle system on ``geom``.

    Args:
        geom: Cell or thin-domain geometry.
        params: Coupling number and the microrotation coefficient in front of
            the microrotation Laplacian.
        bc: Boundary closure; defaults to the geometry's own.

    Returns:
        MicropolarSystem with an exactly symmetric matrix.
    """
    ops = operators_for(geom, bc)
    _check_solvable(ops)
    vol = ops.volume
    n_u = ops.n_faces
    N2, Rc = params.N2, params.Rc

    velocity = (vol * ops.A).tocsr()
    coupling = ((-2.0 * N2 * vol) * ops.R).tocsr()
    coupling.eliminate_zeros()
    rotation = (vol * (Rc * ops.A + 4.0 * N2 * sp.identity(n_u, format="csr"))).tocsr()
    pressure = (vol * ops.G).tocsr()

    matrix = sp.bmat(
        [
            [velocity, coupling, pressure],
            [coupling.T, rotation, None],
            [pressure.T, None, None],
        ],
        format="csr",
    )
    logger.debug("assembled micropolar system: dimension=%d nnz=%d", matrix.shape[0], matrix.nnz)
    return MicropolarSystem(
        operators=ops,
        params=params,
        matrix=matrix,
        velocity_block=velocity,
        coupling_block=coupling,
        rotation_block=rotation,
        pressure_block=pressure,
        n_u=n_u,
        n_w=n_u,
        n_p=ops.n_cells,
    )


def assemble_stokes(geom, bc: Optional[BoundaryCondition] = None) -> MicropolarSystem:
    """Classical Stokes system [[A, G], [G^T, 0]] without microrotation."""
    ops = operators_for(geom, bc)
    _check_solvable(ops)
    vol = ops.volume
    velocity = (vol * ops.A).tocsr()
    pressure = (vol * ops.G).tocsr()
    matrix = sp.bmat([[velocity, pressure], [pressure.T, None]], format="csr")
    return MicropolarSystem(
        operators=ops,
        params=None,
        matrix=matrix,
        velocity_block=velocity,
        coupling_block=None,
        rotation_block=None,
        pressure_block=pressure,
        n_u=ops.n_faces,
        n_w=0,
        n_p=ops.n_cells,
    )


def solve(
    system: MicropolarSystem,
    rhs_u: np.ndarray,
    rhs_w: Optional[np.ndarray] = None,
    tol: Optional[float] = None,
    max_iter: Optional[int] = None,
    preconditioner: Optional[str] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, SolveStats]:
    """Solve the saddle system for face loads ``rhs_u`` and ``rhs_w``.

    The true residual is checked after MINRES returns and the solve restarts
    from the current iterate when the preconditioned stopping test was too
    optimistic.

    Returns:
        (u, w, pi, stats) on the active unknowns; pi has zero mean.

    Raises:
        NoConvergence: with the stats and the best iterate attached.
    """
    settings = get_config().solver
    tol = settings.tol if tol is None else float(tol)
    if not 0.0 < tol <= 1e-4:
        raise InvalidParameter(f"solver tolerance must lie in (0, 1e-4] (got {tol})")
    n_u, n_w, n_p = system.n_u, system.n_w, system.n_p
    rhs_u = np.asarray(rhs_u, dtype=float)
    rhs_w = np.zeros(n_w) if rhs_w is None else np.asarray(rhs_w, dtype=float)
    if rhs_u.shape != (n_u,) or rhs_w.shape != (n_w,):
        raise InvalidParameter("right-hand sides do not match the active faces")

    dimension = system.dimension
    if max_iter is None:
        max_iter = int(settings.max_iter_factor * np.sqrt(dimension))
    b = np.concatenate([rhs_u, rhs_w, np.zeros(n_p)])
    b_norm = float(np.linalg.norm(b))
    u_slice, w_slice, p_slice = system.slices

    if b_norm == 0.0:
        return np.zeros(n_u), np.zeros(n_w), np.zeros(n_p), SolveStats(dimension=dimension)

    M, kind = system.preconditioner(preconditioner or settings.preconditioner)
    counter = {"iterations": 0}

    def count(_):
        counter["iterations"] += 1

    start = time.perf_counter()
    x = np.zeros(dimension)
    residual = 1.0
    restarts = 0
    rtol = tol
    for attempt in range(settings.restarts + 1):
        remaining = max_iter - counter["iterations"]
        if remaining <= 0:
            break
        x, _info = minres(system.matrix, b, x0=x, rtol=rtol, maxiter=remaining, M=M, callback=count)
        r = b - system.matrix @ x
        r_norm = float(np.linalg.norm(r))
        residual = r_norm / b_norm
        if residual <= tol:
            break
        restarts = attempt + 1
        # the next pass solves for the correction; aim below the target
        rtol = min(0.5, 0.5 * tol * b_norm / max(r_norm, np.finfo(float).tiny))

    x[p_slice] -= x[p_slice].mean()
    stats = SolveStats(
        iterations=counter["iterations"],
        residual=residual,
        wall_time=time.perf_counter() - start,
        converged=residual <= tol,
        dimension=dimension,
        restarts=restarts,
        preconditioner=kind,
        divergence_residual=float(np.linalg.norm(system.pressure_block.T @ x[u_slice])) / b_norm,
    )
    u, w, p = x[u_slice].copy(), x[w_slice].copy(), x[p_slice].copy()
    if not stats.converged:
        logger.warning(
            "MINRES stopped at relative residual %.3e after %d iterations", residual, stats.iterations
        )
        raise NoConvergence(
            f"MINRES reached relative residual {residual:.3e} > tol {tol:.1e} "
            f"after {stats.iterations} iterations",
            stats=stats,
            best=(u, w, p),
        )
    logger.info(
        "solved dimension=%d iterations=%d residual=%.2e time=%.2fs (%s)",
        dimension, stats.iterations, residual, stats.wall_time, kind,
    )
    return u, w, p, stats


def energy_identity_residual(
    system: MicropolarSystem,
    u: np.ndarray,
    w: np.ndarray,
    rhs_u: np.ndarray,
    rhs_w: Optional[np.ndarray] = None,
) -> float:
    """Relative defect of <f,u> + <g,w> = <Au,u> + Rc<Aw,w> + 4N2|w|^2 - 4N2 <Rw,u>."""
    work = float(np.dot(rhs_u, u))
    energy = float(np.dot(system.velocity_block @ u, u))
    if system.has_microrotation and rhs_w is not None:
        work += float(np.dot(rhs_w, w))
    if system.has_microrotation:
        energy += float(np.dot(system.rotation_block @ w, w))
        energy += 2.0 * float(np.dot(system.coupling_block @ w, u))
    scale = max(abs(work), abs(energy))
    if scale == 0.0:
        return 0.0
    return abs(work - energy) / scale
