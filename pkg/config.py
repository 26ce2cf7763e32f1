"""Configuration settings for the micropolar homogenization toolkit."""
import os
from pathlib import Path
from dataclasses import dataclass, field
from typing import List, Tuple


@dataclass
class SolverConfig:
    tol: float = field(default_factory=lambda: float(os.environ.get("HOMOG_TOL", "1e-10")))
    # max_iter defaults to factor * sqrt(system dimension)
    max_iter_factor: float = field(default_factory=lambda: float(os.environ.get("HOMOG_MAX_ITER_FACTOR", "20")))
    preconditioner: str = field(default_factory=lambda: os.environ.get("HOMOG_PRECONDITIONER", "auto"))
    # above this many unknowns per velocity component "auto" switches from LU to Jacobi blocks
    lu_max_unknowns: int = 40000
    restarts: int = 3
    darcy_tol: float = 1e-10
    workers: int = field(default_factory=lambda: int(os.environ.get("HOMOG_WORKERS", str(min(6, os.cpu_count() or 1)))))


@dataclass
class GeometryDefaults:
    kind: str = "sphere"
    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    size: Tuple[float, ...] = (0.25,)
    axis: int = 2
    n: int = 16


@dataclass
class PhysicsDefaults:
    N2: float = 0.5
    Rc: float = 1.0


@dataclass
class MacroDefaults:
    extent: Tuple[float, float] = (1.0, 1.0)
    grid: Tuple[int, int] = (64, 64)
    f_preset: str = "solenoidal_sine"
    g_preset: str = "zero"
    f_value: Tuple[float, float] = (1.0, 0.0)
    g_value: Tuple[float, float] = (0.0, 0.0)


@dataclass
class ValidationDefaults:
    eps: List[float] = field(default_factory=lambda: [0.25, 0.125])
    m: int = 8
    h_rule: str = "sqrt"
    unfold_eps: float = 0.25
    unfold_h: float = 0.5
    ratio_band: float = 2.0
    slope_tolerance: float = 0.4
    seed: int = 20240611


@dataclass
class OutputConfig:
    output_dir: Path = field(default_factory=lambda: Path(os.environ.get("HOMOG_OUTPUT_DIR", str(Path(__file__).parent / "output"))))
    formats: str = "csv"
    plot: bool = False
    plot_stride: int = 4

    def __post_init__(self):
        self.output_dir = Path(self.output_dir)


@dataclass
class AppConfig:
    base_dir: Path = field(default_factory=lambda: Path(__file__).parent)
    default_config: Path = field(default_factory=lambda: Path(__file__).parent / "configs" / "default.toml")
    golden_baseline: Path = field(default_factory=lambda: Path(__file__).parent / "golden" / "scaling_baseline.json")
    log_level: str = field(default_factory=lambda: os.environ.get("HOMOG_LOG_LEVEL", "INFO"))
    title: str = "Micropolar thin porous media homogenization"


@dataclass
class Config:
    solver: SolverConfig = field(default_factory=SolverConfig)
    geometry: GeometryDefaults = field(default_factory=GeometryDefaults)
    physics: PhysicsDefaults = field(default_factory=PhysicsDefaults)
    macro: MacroDefaults = field(default_factory=MacroDefaults)
    validation: ValidationDefaults = field(default_factory=ValidationDefaults)
    output: OutputConfig = field(default_factory=OutputConfig)
    app: AppConfig = field(default_factory=AppConfig)


config = Config()

def get_config() -> Config:
    return config

def get_output_path(filename: str, output_dir: Path = None) -> Path:
    directory = Path(output_dir) if output_dir is not None else config.output.output_dir
    directory.mkdir(parents=True, exist_ok=True)
    return directory / filename
