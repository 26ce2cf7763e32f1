"""
Pipeline stages behind the command line: cell problems, Darcy solve and the
validation suite. Each stage returns a StageResult with a step log and a
report section; errors of the toolkit are caught and turned into a failed
result carrying the exit code.
"""
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))
from config import get_config

from src import __version__
from src.cli.run_config import RunConfig
from src.export.plots import plot_macro_solution
from src.export.writers import (
    permeability_filename,
    read_permeability,
    write_geometry_vtk,
    write_macro_csv,
    write_macro_vtk,
    write_matrix_market,
    write_permeability,
    write_report,
    write_scaling_csv,
    write_table_csv,
)
from src.grid.geometry import build_cell_geometry
from src.grid.operators import BoundaryCondition
from src.homogenization.cell import (
    SYMMETRY_TOL,
    PermeabilitySet,
    compute_permeabilities,
    permeability_cache_key,
    solve_all_cell_problems,
    vertical_leakage,
)
from src.homogenization.darcy import MacroProblem, darcy_problem_from_config, solve_darcy
from src.homogenization.resolved import (
    NORMS,
    ForceSpec,
    compare_with_darcy,
    run_sweep,
    scaling_report,
)
from src.homogenization.unfolding import norm_identities, run_identity_suite
from src.solvers.saddle_solver import assemble
from src.utils.errors import ConfigError, HomogenizationError, InputFileError, format_error
from src.utils.helpers import ensure_output_directory

logger = logging.getLogger(__name__)


@dataclass
class StageResult:
    """Result of one pipeline command."""
    success: bool
    message: str
    exit_code: int = 0
    file_path: Optional[str] = None
    files: List[Path] = field(default_factory=list)
    report: Dict[str, Any] = field(default_factory=dict)
    checks: List[Dict[str, Any]] = field(default_factory=list)
    steps: List[str] = field(default_factory=list)
    data: Optional[Any] = None

    @property
    def all_checks_passed(self) -> bool:
        return all(c["passed"] for c in self.checks)


def _check(name: str, value: float, tolerance: float, passed: bool) -> Dict[str, Any]:
    return {"check": name, "value": float(value), "tolerance": float(tolerance), "passed": bool(passed)}


class HomogenizationPipeline:
    """Runs the commands for one RunConfig and writes their artifacts."""

    def __init__(self, run_config: RunConfig):
        self.run_config = run_config
        self.output_dir = Path(run_config.output.directory)

    # -- helpers ------------------------------------------------------------

    @property
    def tol(self) -> float:
        return self.run_config.solver.tol

    @property
    def solver_options(self) -> Dict[str, Any]:
        """Keyword arguments shared by every micropolar solve of this run."""
        s = self.run_config.solver
        return {"tol": s.tol, "workers": s.workers, "max_iter": s.max_iter, "preconditioner": s.preconditioner}

    def cell_geometry(self):
        g = self.run_config.geometry
        return build_cell_geometry(g.obstacle(), g.n)

    def cached_permeability_path(self, geom=None) -> Path:
        """Location of the permeability file that ``cell`` writes for this configuration."""
        geom = geom or self.cell_geometry()
        key = permeability_cache_key(geom.to_dict(), self.run_config.params.physical(), self.tol)
        return self.output_dir / permeability_filename(key)

    def _failure(self, error: Exception, steps: List[str]) -> StageResult:
        steps.append(f"❌ Error: {error}")
        logger.error(format_error(error))
        exit_code = getattr(error, "exit_code", 1)
        return StageResult(success=False, message=format_error(error), exit_code=exit_code, steps=steps)

    def _finish(self, command: str, result: StageResult, started: float) -> StageResult:
        """Attach the run report (configuration echo, checks, manifest) to a finished stage."""
        report = {
            "command": command,
            "version": __version__,
            "configuration": self.run_config.to_dict(),
            "stages": result.report,
            "checks": result.checks,
            "all_checks_passed": result.all_checks_passed,
            "steps": result.steps,
            "wall_time": time.perf_counter() - started,
        }
        path = write_report(report, self.output_dir / f"report_{command}.json", result.files)
        result.files.append(path)
        result.steps.append(f"✅ Report written: {path.name}")
        result.message = "\n".join(result.steps)
        return result

    # -- cell ---------------------------------------------------------------

    def _cell_stage(self) -> StageResult:
        rc = self.run_config
        steps: List[str] = []
        files: List[Path] = []
        geom = self.cell_geometry()
        steps.append(f"✅ Cell geometry: {rc.geometry.kind}, n={geom.n}, porosity={geom.porosity:.4f}")
        params = rc.params.physical()

        start = time.perf_counter()
        solutions = solve_all_cell_problems(geom, params, **self.solver_options)
        iterations = sum(s.stats.iterations for s in solutions.values())
        steps.append(f"✅ Six cell problems solved ({iterations} MINRES iterations)")
        perm = compute_permeabilities(solutions, tol=self.tol)
        steps.append("✅ Permeability checks passed (K1 symmetric positive definite)")

        path = write_permeability(perm, self.output_dir)
        files.append(path)
        steps.append(f"✅ Permeability written: {path.name}")
        if rc.output.wants_vtk:
            files.append(write_geometry_vtk(geom, self.output_dir / "cell_geometry.vtk"))
        if rc.output.matrices:
            system = assemble(geom, params, BoundaryCondition.PERIODIC)
            files.append(write_matrix_market(system.matrix, self.output_dir / "cell_system.mtx",
                                             comment=f"micropolar cell system N2={params.N2} Rc={params.Rc}"))

        res = perm.residuals
        transpose_tol = max(1e-6 * float(np.abs(perm.L1).max()), 10 * self.tol)
        checks = [
            _check("K1_symmetry", res["K1_symmetry"], SYMMETRY_TOL, res["K1_symmetry"] <= SYMMETRY_TOL),
            _check("L2_symmetry", res["L2_symmetry"], SYMMETRY_TOL, res["L2_symmetry"] <= SYMMETRY_TOL),
            _check("K1_positive_definite", res["K1_min_eigenvalue"], 0.0, res["K1_min_eigenvalue"] > 0.0),
            _check("K2_equals_L1_transpose", res["K2_minus_L1T"], transpose_tol, res["K2_minus_L1T"] <= transpose_tol),
        ]
        if "i3_norm" in res:
            i3 = res["i3_norm"]
            checks.append(_check("i3_triviality", i3, 10 * self.tol, i3 <= 10 * self.tol))
        if params.N2 == 0.0:
            leak = max(float(np.abs(perm.K2).max()), float(np.abs(perm.L1).max()))
            checks.append(_check("decoupling", leak, 10 * self.tol, leak <= 10 * self.tol))

        report = {
            "cell": {
                "permeability": perm.to_dict(),
                "permeability_file": path.name,
                "geometry": geom.to_dict(),
                "problems": {f"{i},{k}": s.stats.to_dict() for (i, k), s in solutions.items()},
                "vertical_leakage": vertical_leakage(solutions).tolist(),
                "wall_time": time.perf_counter() - start,
            }
        }
        return StageResult(True, "", file_path=str(path), files=files, report=report,
                           checks=checks, steps=steps, data=perm)

    def run_cell(self) -> StageResult:
        """Solve the six cell problems and write the permeability file and report."""
        started = time.perf_counter()
        try:
            result = self._cell_stage()
            return self._finish("cell", result, started)
        except HomogenizationError as e:
            return self._failure(e, [])

    # -- darcy --------------------------------------------------------------

    def _darcy_stage(self, perm_path: Optional[Path] = None, perm: Optional[PermeabilitySet] = None) -> StageResult:
        rc = self.run_config
        steps: List[str] = []
        files: List[Path] = []
        if perm is None:
            path = Path(perm_path) if perm_path else self.cached_permeability_path()
            perm = read_permeability(path)
            steps.append(f"✅ Permeability loaded: {path}")
        else:
            path = Path(perm_path) if perm_path else None
        if perm.params != rc.params.physical():
            logger.info("permeability file uses N2=%g Rc=%g; the configured params are ignored",
                        perm.params.N2, perm.params.Rc)

        problem = darcy_problem_from_config(perm, rc.macro)
        solution = solve_darcy(problem, tol=get_config().solver.darcy_tol, method=rc.macro.method)
        steps.append(
            f"✅ Darcy {problem.grid[0]}x{problem.grid[1]} solved "
            f"(residual {solution.residuals['relative_residual']:.2e})"
        )

        if rc.output.wants_csv:
            files.append(write_macro_csv(solution, self.output_dir / "macro_solution.csv"))
        if rc.output.wants_vtk:
            files.append(write_macro_vtk(solution, self.output_dir / "macro_solution.vtk"))
        if rc.output.plot:
            files.append(plot_macro_solution(solution, self.output_dir / "macro_solution.html",
                                             stride=rc.output.plot_stride))
        steps.append(f"✅ Macro outputs written: {', '.join(p.name for p in files)}")

        darcy_tol = get_config().solver.darcy_tol
        residual = solution.residuals["relative_residual"]
        checks = [_check("darcy_flux_balance", residual, 10 * darcy_tol, residual <= 10 * darcy_tol)]
        report = {
            "darcy": {
                "permeability_file": str(path) if path else None,
                "permeability_fingerprint": perm.cache_key,
                "grid": list(problem.grid),
                "extent": list(problem.extent),
                "sources": dict(problem.sources),
                "method": rc.macro.method,
                "iterations": solution.iterations,
                "residuals": solution.residuals,
                "max_velocity": float(np.abs(solution.U_prime).max()),
                "wall_time": solution.wall_time,
            }
        }
        return StageResult(True, "", file_path=str(files[0]) if files else None, files=files,
                           report=report, checks=checks, steps=steps, data=solution)

    def run_darcy(self, perm_path=None) -> StageResult:
        """Solve the Darcy problem from a permeability file.

        Without ``perm_path`` the cached file of this configuration is used;
        cell problems are never recomputed here.
        """
        started = time.perf_counter()
        try:
            result = self._darcy_stage(perm_path)
            return self._finish("darcy", result, started)
        except HomogenizationError as e:
            return self._failure(e, [])

    # -- pipeline -----------------------------------------------------------

    def run_pipeline(self, perm_path=None) -> StageResult:
        """Cell stage (unless a permeability file is given) followed by the Darcy stage."""
        started = time.perf_counter()
        steps: List[str] = []
        try:
            if perm_path:
                cell = StageResult(True, "", file_path=str(perm_path))
            else:
                cell = self._cell_stage()
            steps += cell.steps
            darcy = self._darcy_stage(Path(cell.file_path), perm=cell.data)
            steps += darcy.steps
            result = StageResult(
                True, "",
                file_path=darcy.file_path,
                files=cell.files + darcy.files,
                report={**cell.report, **darcy.report},
                checks=cell.checks + darcy.checks,
                steps=steps,
                data=darcy.data,
            )
            return self._finish("pipeline", result, started)
        except HomogenizationError as e:
            return self._failure(e, steps)

    # -- validate -----------------------------------------------------------

    def _permeability_for_validation(self, steps: List[str], files: List[Path]) -> PermeabilitySet:
        geom = self.cell_geometry()
        path = self.cached_permeability_path(geom)
        if path.is_file():
            steps.append(f"✅ Cached permeability reused: {path.name}")
            return read_permeability(path)
        solutions = solve_all_cell_problems(geom, self.run_config.params.physical(), **self.solver_options)
        perm = compute_permeabilities(solutions, tol=self.tol)
        files.append(write_permeability(perm, self.output_dir))
        steps.append(f"✅ Permeability computed: {files[-1].name}")
        return perm

    def _golden_baseline(self) -> Tuple[Path, Optional[Dict[str, Any]]]:
        """Versioned baseline file and its content (None when this run records it).

        Raises:
            ConfigError: the versioned baseline is missing or holds no ratios.
            InputFileError: the versioned baseline is not valid JSON.
        """
        v = self.run_config.validation
        path = Path(v.golden)
        if v.record_baseline:
            return path, None
        if not path.is_file():
            raise ConfigError(
                f"[validation] golden: versioned baseline {path} not found; "
                "record it with `validate --full --record-baseline`"
            )
        try:
            golden = json.loads(path.read_text(encoding="utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise InputFileError(f"versioned baseline {path} is not valid JSON: {e}")
        if any(not isinstance(golden.get(name), (int, float)) for name in ("C_u", "C_w")):
            raise ConfigError(
                f"[validation] golden: {path} holds no scaling ratios; "
                "record them with `validate --full --record-baseline`"
            )
        return path, golden

    def _baseline_checks(
        self, report, forces: ForceSpec, steps: List[str], files: List[Path]
    ) -> List[Dict[str, Any]]:
        """Record the normalized ratios at the coarsest eps and compare with the versioned baseline."""
        rc = self.run_config
        first = report.table.iloc[0]
        baseline = {
            "eps": float(first["eps"]),
            "h": float(first["h"]),
            "m": rc.validation.m,
            "params": rc.params.physical().to_dict(),
            "obstacle": rc.geometry.obstacle().to_dict(),
            "forces": forces.key(),
            "C_u": float(first["u_ratio"]),
            "C_w": float(first["w_ratio"]),
        }
        text = json.dumps(baseline, sort_keys=True, indent=2) + "\n"
        candidate = self.output_dir / "scaling_baseline.json"
        candidate.write_text(text, encoding="utf-8")
        files.append(candidate)

        golden_path, golden = self._golden_baseline()
        if golden is None:
            ensure_output_directory(golden_path.parent)
            golden_path.write_text(text, encoding="utf-8")
            steps.append(f"✅ Versioned baseline recorded: {golden_path}")
            return []
        setup = ("eps", "m", "params", "obstacle", "forces")
        same_setup = all(golden.get(key) == baseline[key] for key in setup)
        if not same_setup:
            steps.append(f"✅ Baseline {golden_path.name} not compared: it records a different setup")
            return []
        band = rc.validation.ratio_band
        checks = []
        for name in ("C_u", "C_w"):
            ratio = baseline[name] / golden[name] if golden[name] else float("inf")
            spread = max(ratio, 1.0 / ratio) if ratio > 0 else float("inf")
            checks.append(_check(f"baseline_{name}", spread, band, spread <= band))
        steps.append(f"✅ Compared with versioned baseline {golden_path.name}")
        return checks

    def _full_validation(self, steps: List[str], files: List[Path]) -> Dict[str, Any]:
        rc = self.run_config
        v = rc.validation
        if rc.macro.f_csv or rc.macro.g_csv:
            raise ConfigError("[macro] full validation needs preset forces, not CSV files")
        self._golden_baseline()
        forces = ForceSpec(rc.macro.f_preset, rc.macro.g_preset, rc.macro.f_value, rc.macro.g_value)
        params = rc.params.physical()

        runs = run_sweep(v.eps, params, rc.geometry.obstacle(), v.m, v.h_rule, extent=rc.macro.extent,
                         forces=forces, **self.solver_options)
        steps.append(f"✅ Resolved sweep finished: eps = {', '.join(f'{r.eps:g}' for r in runs)}")
        report = scaling_report(runs, slope_tolerance=v.slope_tolerance, ratio_band=v.ratio_band)
        files.append(write_scaling_csv(report, self.output_dir / "scaling.csv"))

        checks = []
        for name in NORMS:
            checks.append(_check(f"scaling_slope_{name}", report.slopes[name],
                                 report.expected[name] - report.slope_tolerance, report.passed[name]))
            checks.append(_check(f"scaling_ratio_{name}", report.ratio_spread[name],
                                 report.ratio_band, report.ratios_bounded[name]))
        for run in runs:
            if not run.geometry.aligned:
                continue
            identities = norm_identities(run.u, run.eps, run.h)
            for name, entry in identities.items():
                error = entry["relative_error"]
                label = f"resolved_unfolding_{name}_eps={run.eps:g}"
                checks.append(_check(label, error, 1e-12, error <= 1e-12))
        steps.append("✅ Unfolding identities checked on the resolved velocity (aligned runs)")
        checks += self._baseline_checks(report, forces, steps, files)

        perm = self._permeability_for_validation(steps, files)
        macro_problem = MacroProblem.from_presets(perm, rc.macro.extent, rc.macro.grid, forces.f_preset,
                                                  forces.g_preset, forces.f_value, forces.g_value)
        macro = solve_darcy(macro_problem, tol=get_config().solver.darcy_tol, method=rc.macro.method)
        comparisons = sorted((compare_with_darcy(run, macro) for run in runs), key=lambda c: -c["eps"])
        files.append(write_table_csv(pd.DataFrame(comparisons), self.output_dir / "darcy_comparison.csv"))
        steps.append("✅ Resolved velocity compared with Darcy prediction")
        if len(comparisons) >= 2:
            differences = [c["relative_difference"] for c in comparisons]
            decreasing = all(b < a for a, b in zip(differences, differences[1:]))
            checks.append(_check("darcy_discrepancy_decreasing", differences[-1], differences[0], decreasing))

        return {
            "checks": checks,
            "report": {
                "scaling": report.to_dict(),
                "runs": [run.summary() for run in runs],
                "darcy_comparison": comparisons,
                "permeability_fingerprint": perm.cache_key,
            },
        }

    def run_validate(self) -> StageResult:
        """Unfolding identity suite and, when enabled, the resolved eps-sweep.

        A failed check makes the command fail with exit code 1 after the
        report has been written.
        """
        rc = self.run_config
        v = rc.validation
        started = time.perf_counter()
        steps: List[str] = []
        files: List[Path] = []
        try:
            checks = run_identity_suite(v.unfold_eps, v.unfold_h, v.m, v.seed, extent=rc.macro.extent)
            passed = sum(c["passed"] for c in checks)
            steps.append(f"{'✅' if passed == len(checks) else '❌'} Unfolding identities: {passed}/{len(checks)} passed")
            report: Dict[str, Any] = {"unfolding": {"eps": v.unfold_eps, "h": v.unfold_h, "m": v.m, "seed": v.seed}}
            if v.full:
                full = self._full_validation(steps, files)
                checks += full["checks"]
                report.update(full["report"])
            result = StageResult(True, "", files=files, report=report, checks=checks, steps=steps)
            for check in checks:
                if not check["passed"]:
                    steps.append(f"❌ {check['check']}: {check['value']:.3e} (tolerance {check['tolerance']:.3e})")
            result = self._finish("validate", result, started)
            if not result.all_checks_passed:
                failed = [c["check"] for c in checks if not c["passed"]]
                result.success = False
                result.exit_code = 1
                result.message = f"error[InvariantViolation]: validation checks failed: {', '.join(failed)}"
            return result
        except HomogenizationError as e:
            return self._failure(e, steps)


def cmd_cell(run_config: RunConfig) -> StageResult:
    return HomogenizationPipeline(run_config).run_cell()


def cmd_darcy(run_config: RunConfig, perm_path=None) -> StageResult:
    return HomogenizationPipeline(run_config).run_darcy(perm_path)


def cmd_pipeline(run_config: RunConfig, perm_path=None) -> StageResult:
    return HomogenizationPipeline(run_config).run_pipeline(perm_path)


def cmd_validate(run_config: RunConfig) -> StageResult:
    return HomogenizationPipeline(run_config).run_validate()
