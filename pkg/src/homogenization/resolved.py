"""
Resolved module.
Full micropolar solves on the perforated thin slab at desk scale, the
a-priori scaling experiment over a sweep of eps, and the comparison of the
averaged resolved velocity with the homogenized Darcy prediction.

Regime: the microrotation number is R_M = eps^2 Rc and the forces are
f_eps = (f'(x'), 0), g_eps = eps (g'(x'), 0).
"""
import logging
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))
from config import get_config

from src.grid.geometry import ObstacleSpec, ThinDomainGeometry, build_thin_domain
from src.grid.operators import (
    BoundaryCondition,
    StaggeredVectorField,
    divergence_norm,
    from_cells,
    from_faces,
    gradient_energy,
    mass_norm,
    sample_faces,
)
from src.homogenization.darcy import MacroSolution, force_preset
from src.solvers.saddle_solver import (
    PhysicalParams,
    SolveStats,
    assemble,
    energy_identity_residual,
    solve,
)
from src.utils.errors import IncompatibleInputs, InsufficientRuns, InvalidParameter

logger = logging.getLogger(__name__)

NORMS = ("u", "Du", "w", "Dw")
# (power of eps, power of h) in the a-priori bounds
EXPONENTS = {"u": (2.0, 0.5), "Du": (1.0, 0.5), "w": (1.0, 0.5), "Dw": (0.0, 0.5)}


def default_h_rule(eps: float) -> float:
    return float(np.sqrt(eps))


def parse_h_rule(rule: str) -> Callable[[float], float]:
    """``sqrt`` or ``eps^a`` with 0 < a < 1 (eps / h must vanish with eps)."""
    rule = str(rule).strip()
    if rule == "sqrt":
        return default_h_rule
    match = re.fullmatch(r"eps\^([0-9]*\.?[0-9]+)", rule)
    if not match:
        raise InvalidParameter(f"unknown h_rule '{rule}' (expected 'sqrt' or 'eps^a')")
    power = float(match.group(1))
    if not 0.0 < power < 1.0:
        raise InvalidParameter(f"h_rule exponent must lie in (0, 1) (got {power})")
    return lambda eps: float(eps ** power)


@dataclass
class ForceSpec:
    f_preset: str = "solenoidal_sine"
    g_preset: str = "zero"
    f_value: Tuple[float, float] = (1.0, 0.0)
    g_value: Tuple[float, float] = (0.0, 0.0)

    def key(self) -> Dict[str, Any]:
        return {
            "f": self.f_preset,
            "g": self.g_preset,
            "f_value": [float(v) for v in self.f_value],
            "g_value": [float(v) for v in self.g_value],
        }


@dataclass
class ResolvedRun:
    geometry: ThinDomainGeometry
    params: PhysicalParams
    effective: PhysicalParams
    forces: ForceSpec
    u: StaggeredVectorField
    w: StaggeredVectorField
    p: Any
    norms: Dict[str, float]
    stats: SolveStats
    energy_residual: float = 0.0
    divergence: float = 0.0

    @property
    def eps(self) -> float:
        return self.geometry.eps

    @property
    def h(self) -> float:
        return self.geometry.h

    def summary(self) -> Dict[str, Any]:
        return {
            "eps": self.eps,
            "h": self.h,
            "grid": list(self.geometry.grid_shape),
            "obstacles": self.geometry.obstacle_count,
            "norms": dict(self.norms),
            "energy_residual": self.energy_residual,
            "divergence": self.divergence,
            "stats": self.stats.to_dict(),
        }


@dataclass
class ScalingSample:
    """Norms of one run; enough to fit scaling slopes."""
    eps: float
    h: float
    norms: Dict[str, float]
    params: PhysicalParams
    forces: Optional[ForceSpec] = None


def _face_load(ops, function, scale: float) -> np.ndarray:
    f1 = lambda x0, x1, x2: scale * function(x0, x1)[0]
    f2 = lambda x0, x1, x2: scale * function(x0, x1)[1]
    return ops.volume * sample_faces(ops, [f1, f2, None])


def solve_resolved(
    geometry: ThinDomainGeometry,
    params: PhysicalParams,
    f_preset: str = "solenoidal_sine",
    g_preset: str = "zero",
    tol: Optional[float] = None,
    f_value: Sequence[float] = (1.0, 0.0),
    g_value: Sequence[float] = (0.0, 0.0),
    max_iter: Optional[int] = None,
    preconditioner: Optional[str] = None,
) -> ResolvedRun:
    """Solve the micropolar system on the resolved slab in physical variables.

    Args:
        geometry: Thin domain from build_thin_domain.
        params: N2 and the order-one Rc; the solve uses R_M = eps^2 Rc.
        f_preset: Named in-plane force f'.
        g_preset: Named in-plane torque g'; applied as eps g'.
        tol: Relative MINRES tolerance.

    Returns:
        ResolvedRun with fields, the four norms and solve diagnostics.
    """
    if not isinstance(geometry, ThinDomainGeometry):
        raise InvalidParameter("solve_resolved needs a geometry from build_thin_domain")
    eps = geometry.eps
    effective = PhysicalParams(N2=params.N2, Rc=eps ** 2 * params.Rc)
    system = assemble(geometry, effective, BoundaryCondition.DIRICHLET_BOX)
    ops = system.operators
    extent = geometry.omega_extent

    rhs_u = _face_load(ops, force_preset(f_preset, f_value, extent), 1.0)
    rhs_w = _face_load(ops, force_preset(g_preset, g_value, extent), eps)
    u, w, p, stats = solve(system, rhs_u, rhs_w, tol=tol, max_iter=max_iter, preconditioner=preconditioner)

    norms = {
        "u": mass_norm(ops, u),
        "Du": float(np.sqrt(max(gradient_energy(ops, u), 0.0))),
        "w": mass_norm(ops, w),
        "Dw": float(np.sqrt(max(gradient_energy(ops, w), 0.0))),
    }
    run = ResolvedRun(
        geometry=geometry,
        params=params,
        effective=effective,
        forces=ForceSpec(f_preset, g_preset, tuple(f_value), tuple(g_value)),
        u=from_faces(ops, u),
        w=from_faces(ops, w),
        p=from_cells(ops, p, mean_zero=True),
        norms=norms,
        stats=stats,
        energy_residual=energy_identity_residual(system, u, w, rhs_u, rhs_w),
        divergence=divergence_norm(ops, u),
    )
    logger.info(
        "resolved eps=%g h=%.4g grid=%s |u|=%.3e |w|=%.3e",
        eps, geometry.h, geometry.grid_shape, norms["u"], norms["w"],
    )
    return run


def run_sweep(
    eps_values: Sequence[float],
    params: PhysicalParams,
    shape: ObstacleSpec,
    m: int,
    h_rule: str = "sqrt",
    extent: Sequence[float] = (1.0, 1.0),
    forces: Optional[ForceSpec] = None,
    tol: Optional[float] = None,
    workers: Optional[int] = None,
    max_iter: Optional[int] = None,
    preconditioner: Optional[str] = None,
) -> List[ResolvedRun]:
    """Resolved runs over eps with h = h_rule(eps); runs execute concurrently."""
    if not eps_values:
        raise InsufficientRuns("empty eps list")
    rule = parse_h_rule(h_rule)
    forces = forces or ForceSpec()
    geometries = [build_thin_domain(tuple(extent), eps, rule(eps), shape, m) for eps in eps_values]
    workers = workers or min(len(geometries), get_config().solver.workers)

    def job(geom):
        return solve_resolved(
            geom, params, forces.f_preset, forces.g_preset, tol,
            forces.f_value, forces.g_value, max_iter, preconditioner,
        )

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(job, geometries))


def _sample(run) -> ScalingSample:
    if isinstance(run, ScalingSample):
        return run
    return ScalingSample(run.eps, run.h, dict(run.norms), run.params, run.forces)


@dataclass
class ScalingReport:
    table: pd.DataFrame
    slopes: Dict[str, float]
    expected: Dict[str, float]
    passed: Dict[str, bool]
    ratio_spread: Dict[str, float]
    ratios_bounded: Dict[str, bool]
    slope_tolerance: float
    ratio_band: float

    @property
    def all_passed(self) -> bool:
        return all(self.passed.values())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "runs": self.table.to_dict(orient="records"),
            "slopes": self.slopes,
            "expected_slopes": self.expected,
            "passed": self.passed,
            "ratio_spread": self.ratio_spread,
            "ratios_bounded": self.ratios_bounded,
            "slope_tolerance": self.slope_tolerance,
            "ratio_band": self.ratio_band,
        }


def scaling_report(
    runs: Sequence[Any],
    slope_tolerance: Optional[float] = None,
    ratio_band: Optional[float] = None,
) -> ScalingReport:
    """Fit log-norm against log-eps and compare with the a-priori exponents.

    A norm bounded by C eps^a h^b gives the expected slope a + b * slope(log h);
    a slope passes when it is at least the expected value minus the tolerance.

    Raises:
        InsufficientRuns: fewer than two distinct eps.
        IncompatibleInputs: runs with different physics.
    """
    defaults = get_config().validation
    slope_tolerance = defaults.slope_tolerance if slope_tolerance is None else slope_tolerance
    ratio_band = defaults.ratio_band if ratio_band is None else ratio_band
    samples = sorted((_sample(r) for r in runs), key=lambda s: -s.eps)
    if len({s.eps for s in samples}) < 2:
        raise InsufficientRuns("scaling slopes need at least two runs with distinct eps")
    first = samples[0]
    for s in samples[1:]:
        if s.params != first.params or (s.forces and first.forces and s.forces.key() != first.forces.key()):
            raise IncompatibleInputs("scaling runs use different physics")

    log_eps = np.log([s.eps for s in samples])
    log_h = np.log([s.h for s in samples])
    h_slope = float(np.polyfit(log_eps, log_h, 1)[0])

    rows = []
    for s in samples:
        row = {"eps": s.eps, "h": s.h}
        for name in NORMS:
            a, b = EXPONENTS[name]
            row[name] = s.norms[name]
            row[f"{name}_ratio"] = s.norms[name] / (s.eps ** a * s.h ** b)
        rows.append(row)
    table = pd.DataFrame(rows)

    slopes, expected, passed, spread, bounded = {}, {}, {}, {}, {}
    for name in NORMS:
        a, b = EXPONENTS[name]
        values = table[name].to_numpy()
        expected[name] = a + b * h_slope
        if np.all(values > 0):
            slopes[name] = float(np.polyfit(log_eps, np.log(values), 1)[0])
            passed[name] = bool(slopes[name] >= expected[name] - slope_tolerance)
            ratios = table[f"{name}_ratio"].to_numpy()
            spread[name] = float(ratios.max() / ratios.min())
            bounded[name] = bool(spread[name] <= ratio_band)
        else:
            slopes[name] = float("nan")
            passed[name] = False
            spread[name] = float("nan")
            bounded[name] = False
    return ScalingReport(table, slopes, expected, passed, spread, bounded, slope_tolerance, ratio_band)


def _block_average(values: np.ndarray, blocks: Tuple[int, int]) -> np.ndarray:
    n1, n2 = values.shape
    b1, b2 = blocks
    if n1 % b1 or n2 % b2:
        raise IncompatibleInputs(f"grid {values.shape} does not split into {blocks} eps-blocks")
    return values.reshape(b1, n1 // b1, b2, n2 // b2).mean(axis=(1, 3))


def averaged_velocity(run: ResolvedRun) -> np.ndarray:
    """In-plane velocity averaged over the thickness and each eps-cell, divided by eps^2.

    Returns:
        Array (2, B1, B2) over the eps-blocks of omega.
    """
    geom = run.geometry
    blocks = geom.blocks[:2]
    averages = []
    for axis in (0, 1):
        faces = run.u.components[axis]
        # face i sits between cells i and i+1; the face before cell 0 is a wall
        shifted = np.concatenate([np.zeros_like(np.take(faces, [0], axis=axis)),
                                  np.take(faces, np.arange(faces.shape[axis] - 1), axis=axis)], axis=axis)
        cells = 0.5 * (faces + shifted)
        vertical = cells.sum(axis=2) * geom.spacings[2] / geom.h
        averages.append(_block_average(vertical, blocks) / geom.eps ** 2)
    return np.stack(averages)


def compare_with_darcy(run: ResolvedRun, macro: MacroSolution) -> Dict[str, Any]:
    """Relative L2 distance between the averaged resolved velocity and U'.

    Both fields are averaged over the eps-cells of omega; no pass/fail.
    """
    perm = macro.problem.perm
    if perm.params != run.params:
        raise IncompatibleInputs(
            f"resolved run uses N2={run.params.N2}, Rc={run.params.Rc} but the Darcy "
            f"permeability uses N2={perm.params.N2}, Rc={perm.params.Rc}"
        )
    shape = run.geometry.shape.to_dict()
    cell_shape = {key: perm.geometry.get(key) for key in shape}
    if cell_shape != shape:
        raise IncompatibleInputs("resolved obstacle differs from the cell obstacle of the permeability")
    sources = macro.problem.sources
    if sources.get("f") != run.forces.f_preset or sources.get("g") != run.forces.g_preset:
        raise IncompatibleInputs("resolved run and Darcy problem use different forces")
    if tuple(macro.problem.extent) != tuple(run.geometry.omega_extent):
        raise IncompatibleInputs("resolved run and Darcy problem live on different omega")

    resolved = averaged_velocity(run)
    blocks = resolved.shape[1:]
    darcy = np.stack([_block_average(macro.U_prime[a], blocks) for a in (0, 1)])
    cell_area = np.prod(macro.problem.extent) / np.prod(blocks)
    resolved_norm = float(np.sqrt(cell_area * np.sum(resolved ** 2)))
    darcy_norm = float(np.sqrt(cell_area * np.sum(darcy ** 2)))
    difference = float(np.sqrt(cell_area * np.sum((resolved - darcy) ** 2)))
    return {
        "eps": run.eps,
        "h": run.h,
        "resolved_norm": resolved_norm,
        "darcy_norm": darcy_norm,
        "absolute_difference": difference,
        "relative_difference": difference / darcy_norm if darcy_norm > 0 else float("nan"),
    }
