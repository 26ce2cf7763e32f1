"""
Run configuration.
TOML files with the sections geometry, params, macro, solver, validation and
output. Omitted keys fall back to the defaults in config.py; unknown keys are
rejected so a typo never silently changes a run.
"""
import logging
import os
import sys
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))
from config import get_config

from src.grid.geometry import ObstacleKind, ObstacleSpec
from src.homogenization.darcy import FORCE_PRESETS
from src.homogenization.resolved import parse_h_rule
from src.solvers.saddle_solver import PhysicalParams
from src.utils.errors import ConfigError, HomogenizationError, InputFileError

logger = logging.getLogger(__name__)

OUTPUT_FORMATS = ("csv", "vtk", "both")
PRECONDITIONERS = ("auto", "lu", "jacobi")

SCHEMA: Dict[str, Tuple[str, ...]] = {
    "geometry": ("kind", "center", "size", "axis", "n"),
    "params": ("N2", "Rc"),
    "macro": ("extent", "grid", "f_preset", "g_preset", "f_value", "g_value", "f_csv", "g_csv", "method"),
    "solver": ("tol", "max_iter", "preconditioner", "workers"),
    "validation": (
        "eps", "m", "h_rule", "unfold_eps", "unfold_h", "ratio_band", "slope_tolerance", "seed",
        "full", "golden", "record_baseline",
    ),
    "output": ("directory", "formats", "plot", "plot_stride", "matrices"),
}


@dataclass
class GeometrySection:
    kind: str
    center: Tuple[float, float, float]
    size: Tuple[float, ...]
    axis: int
    n: int

    def obstacle(self) -> ObstacleSpec:
        return ObstacleSpec(kind=self.kind, center=self.center, size=self.size, axis=self.axis)


@dataclass
class ParamsSection:
    N2: float
    Rc: float

    def physical(self) -> PhysicalParams:
        return PhysicalParams(N2=self.N2, Rc=self.Rc)


@dataclass
class MacroSection:
    extent: Tuple[float, float]
    grid: Tuple[int, int]
    f_preset: str
    g_preset: str
    f_value: Tuple[float, float]
    g_value: Tuple[float, float]
    f_csv: Optional[Path] = None
    g_csv: Optional[Path] = None
    method: str = "cg"


@dataclass
class SolverSection:
    tol: float
    max_iter: Optional[int]
    preconditioner: str
    workers: int


@dataclass
class ValidationSection:
    eps: List[float]
    m: int
    h_rule: str
    unfold_eps: float
    unfold_h: float
    ratio_band: float
    slope_tolerance: float
    seed: int
    full: bool = False
    golden: Optional[Path] = None
    record_baseline: bool = False


@dataclass
class OutputSection:
    directory: Path
    formats: str
    plot: bool
    plot_stride: int
    matrices: bool = False

    @property
    def wants_csv(self) -> bool:
        return self.formats in ("csv", "both")

    @property
    def wants_vtk(self) -> bool:
        return self.formats in ("vtk", "both")


@dataclass
class RunConfig:
    geometry: GeometrySection
    params: ParamsSection
    macro: MacroSection
    solver: SolverSection
    validation: ValidationSection
    output: OutputSection
    source: Optional[Path] = None

    def to_dict(self) -> Dict[str, Any]:
        """Configuration echo for reports; paths as strings, source file omitted."""
        payload = {}
        for name in SCHEMA:
            section = asdict(getattr(self, name))
            payload[name] = {
                key: (str(value) if isinstance(value, Path) else list(value) if isinstance(value, tuple) else value)
                for key, value in section.items()
            }
        return payload


# ---------------------------------------------------------------------------
# value checks

def _fail(section: str, key: str, requirement: str, value: Any) -> ConfigError:
    return ConfigError(f"[{section}] {key}: {requirement} (got {value!r})")


def _number(section: str, key: str, value: Any, integer: bool = False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise _fail(section, key, "must be a number", value)
    if integer:
        if float(value) != int(value):
            raise _fail(section, key, "must be an integer", value)
        return int(value)
    return float(value)


def _vector(section: str, key: str, value: Any, length: Optional[int] = None, integer: bool = False):
    if not isinstance(value, (list, tuple)):
        value = [value]
    if length is not None and len(value) != length:
        raise _fail(section, key, f"needs {length} values", value)
    return tuple(_number(section, key, v, integer=integer) for v in value)


def _choice(section: str, key: str, value: Any, options) -> str:
    if value not in options:
        raise _fail(section, key, f"must be one of {', '.join(options)}", value)
    return value


def _flag(section: str, key: str, value: Any) -> bool:
    if not isinstance(value, bool):
        raise _fail(section, key, "must be true or false", value)
    return value


def _resolve_path(value: Any, base: Path) -> Path:
    path = Path(str(value)).expanduser()
    return path if path.is_absolute() else (base / path)


# ---------------------------------------------------------------------------
# section builders

def _geometry(raw: Mapping[str, Any]) -> GeometrySection:
    d = get_config().geometry
    kind = _choice("geometry", "kind", raw.get("kind", d.kind), [k.value for k in ObstacleKind])
    section = GeometrySection(
        kind=kind,
        center=_vector("geometry", "center", raw.get("center", d.center), 3),
        size=_vector("geometry", "size", raw.get("size", d.size)),
        axis=_number("geometry", "axis", raw.get("axis", d.axis), integer=True),
        n=_number("geometry", "n", raw.get("n", d.n), integer=True),
    )
    if section.n < 4:
        raise _fail("geometry", "n", "n >= 4 required", section.n)
    try:
        section.obstacle()
    except HomogenizationError as e:
        raise ConfigError(f"[geometry] {e}")
    return section


def _params(raw: Mapping[str, Any]) -> ParamsSection:
    d = get_config().physics
    N2 = _number("params", "N2", raw.get("N2", d.N2))
    Rc = _number("params", "Rc", raw.get("Rc", d.Rc))
    if not 0.0 <= N2 < 1.0:
        raise ConfigError(f"0 < N2 < 1 required (got N2={N2})")
    if Rc <= 0.0:
        raise ConfigError(f"Rc > 0 required (got Rc={Rc})")
    return ParamsSection(N2=N2, Rc=Rc)


def _macro(raw: Mapping[str, Any], base: Path) -> MacroSection:
    d = get_config().macro
    section = MacroSection(
        extent=_vector("macro", "extent", raw.get("extent", d.extent), 2),
        grid=_vector("macro", "grid", raw.get("grid", d.grid), 2, integer=True),
        f_preset=_choice("macro", "f_preset", raw.get("f_preset", d.f_preset), FORCE_PRESETS),
        g_preset=_choice("macro", "g_preset", raw.get("g_preset", d.g_preset), FORCE_PRESETS),
        f_value=_vector("macro", "f_value", raw.get("f_value", d.f_value), 2),
        g_value=_vector("macro", "g_value", raw.get("g_value", d.g_value), 2),
        method=_choice("macro", "method", raw.get("method", "cg"), ("cg", "direct")),
    )
    if min(section.extent) <= 0.0:
        raise _fail("macro", "extent", "extents must be positive", list(section.extent))
    if min(section.grid) < 4:
        raise _fail("macro", "grid", "at least 4 cells per axis required", list(section.grid))
    for name in ("f_csv", "g_csv"):
        if name in raw:
            path = _resolve_path(raw[name], base)
            if not path.is_file():
                raise InputFileError(f"[macro] {name}: file not found: {path}")
            setattr(section, name, path)
    return section


def _solver(raw: Mapping[str, Any]) -> SolverSection:
    d = get_config().solver
    tol = _number("solver", "tol", raw.get("tol", d.tol))
    if not 0.0 < tol <= 1e-4:
        raise _fail("solver", "tol", "0 < tol <= 1e-4 required", tol)
    max_iter = raw.get("max_iter")
    if max_iter is not None:
        max_iter = _number("solver", "max_iter", max_iter, integer=True)
        if max_iter < 1:
            raise _fail("solver", "max_iter", "must be positive", max_iter)
    workers = _number("solver", "workers", raw.get("workers", d.workers), integer=True)
    if workers < 1:
        raise _fail("solver", "workers", "must be positive", workers)
    return SolverSection(
        tol=tol,
        max_iter=max_iter,
        preconditioner=_choice("solver", "preconditioner", raw.get("preconditioner", d.preconditioner), PRECONDITIONERS),
        workers=workers,
    )


def _validation(raw: Mapping[str, Any], base: Path) -> ValidationSection:
    d = get_config().validation
    golden = raw["golden"] if "golden" in raw else get_config().app.golden_baseline
    eps = list(_vector("validation", "eps", raw.get("eps", d.eps)))
    section = ValidationSection(
        eps=eps,
        m=_number("validation", "m", raw.get("m", d.m), integer=True),
        h_rule=str(raw.get("h_rule", d.h_rule)),
        unfold_eps=_number("validation", "unfold_eps", raw.get("unfold_eps", d.unfold_eps)),
        unfold_h=_number("validation", "unfold_h", raw.get("unfold_h", d.unfold_h)),
        ratio_band=_number("validation", "ratio_band", raw.get("ratio_band", d.ratio_band)),
        slope_tolerance=_number("validation", "slope_tolerance", raw.get("slope_tolerance", d.slope_tolerance)),
        seed=_number("validation", "seed", raw.get("seed", d.seed), integer=True),
        full=_flag("validation", "full", raw.get("full", False)),
        golden=_resolve_path(golden, base),
        record_baseline=_flag("validation", "record_baseline", raw.get("record_baseline", False)),
    )
    if any(not 0.0 < e < 1.0 for e in section.eps):
        raise _fail("validation", "eps", "every eps must lie in (0, 1)", section.eps)
    if section.m < 4:
        raise _fail("validation", "m", "m >= 4 required", section.m)
    if not 0.0 < section.unfold_eps < section.unfold_h:
        raise _fail("validation", "unfold_eps", "0 < unfold_eps < unfold_h required", section.unfold_eps)
    if section.ratio_band < 1.0:
        raise _fail("validation", "ratio_band", "must be at least 1", section.ratio_band)
    try:
        parse_h_rule(section.h_rule)
    except HomogenizationError as e:
        raise ConfigError(f"[validation] h_rule: {e}")
    return section


def _output(raw: Mapping[str, Any], base: Path) -> OutputSection:
    d = get_config().output
    directory = _resolve_path(raw["directory"], base) if "directory" in raw else Path(d.output_dir)
    section = OutputSection(
        directory=directory,
        formats=_choice("output", "formats", raw.get("formats", d.formats), OUTPUT_FORMATS),
        plot=_flag("output", "plot", raw.get("plot", d.plot)),
        plot_stride=_number("output", "plot_stride", raw.get("plot_stride", d.plot_stride), integer=True),
        matrices=_flag("output", "matrices", raw.get("matrices", False)),
    )
    if section.plot_stride < 1:
        raise _fail("output", "plot_stride", "must be positive", section.plot_stride)
    return section


def _check_keys(data: Mapping[str, Any]) -> None:
    for section, values in data.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        if not isinstance(values, Mapping):
            raise ConfigError(f"[{section}] must be a table")
        for key in values:
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key '{key}' in [{section}]")


def _apply_overrides(data: Dict[str, Dict[str, Any]], overrides: Mapping[str, Any]) -> None:
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, _, key = dotted.partition(".")
        data.setdefault(section, {})[key] = value


def run_config_from_dict(
    data: Mapping[str, Any],
    base: Optional[Path] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    source: Optional[Path] = None,
) -> RunConfig:
    """Validate a parsed key tree and build the RunConfig.

    Raises:
        ConfigError: unknown key, wrong type or out-of-range value.
        InputFileError: a referenced CSV file is missing.
    """
    data = {section: dict(values) if isinstance(values, Mapping) else values for section, values in data.items()}
    _apply_overrides(data, overrides or {})
    _check_keys(data)
    base = Path(base) if base is not None else Path.cwd()

    run = RunConfig(
        geometry=_geometry(data.get("geometry", {})),
        params=_params(data.get("params", {})),
        macro=_macro(data.get("macro", {}), base),
        solver=_solver(data.get("solver", {})),
        validation=_validation(data.get("validation", {}), base),
        output=_output(data.get("output", {}), base),
        source=source,
    )
    if run.validation.full and not run.validation.eps:
        raise ConfigError("[validation] eps: full validation needs a nonempty eps list")
    if run.validation.record_baseline and not run.validation.full:
        raise ConfigError("[validation] record_baseline: recording a baseline needs the full validation")
    return run


def load_run_config(path=None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Read a TOML run configuration; without a path only defaults and overrides apply.

    Overrides use dotted keys, e.g. ``{"output.directory": "out", "validation.full": True}``.
    Relative paths inside the file resolve against the file's directory.
    """
    if path is None:
        logger.info("no configuration file given; using defaults")
        return run_config_from_dict({}, overrides=overrides)
    path = Path(path)
    if not path.is_file():
        raise InputFileError(f"configuration file not found: {path}")
    try:
        with open(path, "rb") as handle:
            data = tomllib.load(handle)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"cannot parse {path}: {e}")
    logger.info("configuration loaded from %s", path)
    return run_config_from_dict(data, base=path.parent.resolve(), overrides=overrides, source=path)
