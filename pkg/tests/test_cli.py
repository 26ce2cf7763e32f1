import json
from types import SimpleNamespace

import pandas as pd
import pytest

from config import get_config
from src.cli.app import create_parser, main
from src.cli.pipeline import HomogenizationPipeline
from src.cli.run_config import load_run_config
from src.homogenization.resolved import ForceSpec
from src.utils.errors import ConfigError, InputFileError

SMALL = """
[geometry]
kind = "sphere"
size = [0.25]
n = 8

[params]
N2 = {N2}
Rc = 1.0

[macro]
grid = [16, 16]
method = "direct"

[solver]
tol = 1e-10
preconditioner = "lu"

[validation]
eps = {eps}
m = 8
{extra}

[output]
formats = "{formats}"
"""


def _config(tmp_path, N2=0.5, eps="[0.25, 0.125]", extra="", formats="csv", name="run.toml"):
    path = tmp_path / name
    path.write_text(SMALL.format(N2=N2, eps=eps, extra=extra, formats=formats), encoding="utf-8")
    return path


def _run(tmp_path, *args, config=None):
    config = config or _config(tmp_path)
    return main([args[0], "--config", str(config), "--out", str(tmp_path / "out"), *args[1:]])


def test_parser_requires_a_command():
    with pytest.raises(SystemExit):
        create_parser().parse_args([])


def test_out_of_range_coupling_exits_with_config_error(tmp_path, capsys):
    code = _run(tmp_path, "cell", config=_config(tmp_path, N2=1.5))
    assert code == 2
    err = capsys.readouterr().err
    assert "error[ConfigError]" in err
    assert "0 < N2 < 1 required" in err
    assert not (tmp_path / "out").exists()


def test_unknown_key_exits_with_config_error(tmp_path, capsys):
    code = _run(tmp_path, "cell", config=_config(tmp_path, extra="bogus = 1"))
    assert code == 2
    assert "unknown key 'bogus' in [validation]" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    with pytest.raises(InputFileError):
        load_run_config(tmp_path / "absent.toml")


def test_overrides_replace_file_values(tmp_path):
    rc = load_run_config(_config(tmp_path), {"output.formats": "both", "validation.full": None})
    assert rc.output.formats == "both"
    assert rc.validation.full is False


def test_full_validation_needs_eps_values(tmp_path, capsys):
    code = _run(tmp_path, "validate", "--full", config=_config(tmp_path, eps="[]"))
    assert code == 2
    assert "full validation needs a nonempty eps list" in capsys.readouterr().err


def test_full_validation_with_empty_eps_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(_config(tmp_path, eps="[]"), {"validation.full": True})


def test_darcy_without_permeability_names_the_file(tmp_path, capsys):
    missing = tmp_path / "nowhere" / "perm.json"
    code = _run(tmp_path, "darcy", "--perm", str(missing))
    assert code == 2
    err = capsys.readouterr().err
    assert "error[InputFileError]" in err
    assert str(missing) in err


def test_validate_unfolding_only(tmp_path, capsys):
    assert _run(tmp_path, "validate") == 0
    report = json.loads((tmp_path / "out" / "report_validate.json").read_text(encoding="utf-8"))
    assert report["all_checks_passed"]
    assert any(c["check"] == "fold_unfold_identity" for c in report["checks"])


def test_cell_then_darcy(tmp_path):
    assert _run(tmp_path, "cell", config=_config(tmp_path, formats="both")) == 0
    out = tmp_path / "out"
    perm_files = list(out.glob("permeability_*.json"))
    assert len(perm_files) == 1
    assert (out / "cell_geometry.vtk").is_file()
    cell_report = json.loads((out / "report_cell.json").read_text(encoding="utf-8"))
    assert cell_report["all_checks_passed"]
    assert cell_report["configuration"]["params"]["N2"] == 0.5

    # darcy finds the cached permeability without --perm
    assert _run(tmp_path, "darcy", config=_config(tmp_path, formats="both")) == 0
    frame = pd.read_csv(out / "macro_solution.csv")
    assert list(frame.columns) == ["z1", "z2", "p", "U1", "U2", "W1", "W2"]
    assert len(frame) == 16 * 16
    assert (out / "macro_solution.vtk").read_text(encoding="ascii").startswith("# vtk DataFile Version")
    darcy_report = json.loads((out / "report_darcy.json").read_text(encoding="utf-8"))
    assert darcy_report["stages"]["darcy"]["permeability_fingerprint"] == perm_files[0].stem.split("_", 1)[1]


def test_pipeline_runs_are_bitwise_reproducible(tmp_path):
    config = _config(tmp_path, formats="both")
    manifests = []
    for name in ("a", "b"):
        assert main(["pipeline", "--config", str(config), "--out", str(tmp_path / name)]) == 0
        report = json.loads((tmp_path / name / "report_pipeline.json").read_text(encoding="utf-8"))
        manifests.append({entry["file"]: entry["sha256"] for entry in report["files"]})
    first, second = manifests
    assert "macro_solution.csv" in first and "macro_solution.vtk" in first
    assert any(name.startswith("permeability_") for name in first)
    assert first == second
    for name in first:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_run_settings_do_not_leak_into_global_config(tmp_path):
    settings = get_config().solver
    before = (settings.preconditioner, settings.workers, settings.tol)
    config = tmp_path / "jacobi.toml"
    text = _config(tmp_path).read_text(encoding="utf-8")
    jacobi = 'preconditioner = "jacobi"\nworkers = 1\nmax_iter = 50000'
    config.write_text(text.replace('preconditioner = "lu"', jacobi), encoding="utf-8")
    assert main(["cell", "--config", str(config), "--out", str(tmp_path / "out")]) == 0
    report = json.loads((tmp_path / "out" / "report_cell.json").read_text(encoding="utf-8"))
    assert {p["preconditioner"] for p in report["stages"]["cell"]["problems"].values()} == {"jacobi"}
    assert (settings.preconditioner, settings.workers, settings.tol) == before


def _scaling_table(u_ratio=1.2, w_ratio=0.8):
    frame = pd.DataFrame({"eps": [0.25, 0.125], "h": [0.5, 0.125 ** 0.5],
                          "u_ratio": [u_ratio, u_ratio], "w_ratio": [w_ratio, w_ratio]})
    return SimpleNamespace(table=frame)


def _pipeline(tmp_path, golden, record=False):
    overrides = {"output.directory": str(tmp_path / "out"), "validation.full": True,
                 "validation.record_baseline": record or None}
    config = _config(tmp_path, extra=f'golden = "{golden.as_posix()}"')
    pipeline = HomogenizationPipeline(load_run_config(config, overrides))
    pipeline.output_dir.mkdir(parents=True, exist_ok=True)
    return pipeline


def test_full_validation_without_golden_baseline_is_a_config_error(tmp_path, capsys):
    golden = tmp_path / "golden" / "missing.json"
    config = _config(tmp_path, extra=f'golden = "{golden.as_posix()}"')
    code = _run(tmp_path, "validate", "--full", config=config)
    assert code == 2
    err = capsys.readouterr().err
    assert "error[ConfigError]" in err
    assert "versioned baseline" in err and "--record-baseline" in err


def test_baseline_without_ratios_is_a_config_error(tmp_path):
    golden = tmp_path / "baseline.json"
    golden.write_text(json.dumps({"C_u": None, "C_w": None}), encoding="utf-8")
    pipeline = _pipeline(tmp_path, golden)
    with pytest.raises(ConfigError, match="holds no scaling ratios"):
        pipeline._baseline_checks(_scaling_table(), ForceSpec(), [], [])


def test_recorded_baseline_is_compared_on_later_runs(tmp_path):
    golden = tmp_path / "golden" / "baseline.json"
    steps = []
    recorder = _pipeline(tmp_path, golden, record=True)
    assert recorder._baseline_checks(_scaling_table(), ForceSpec(), steps, []) == []
    assert golden.is_file() and "recorded" in steps[-1]
    recorded = json.loads(golden.read_text(encoding="utf-8"))
    assert recorded["C_u"] == 1.2 and recorded["eps"] == 0.25

    pipeline = _pipeline(tmp_path, golden)
    within = pipeline._baseline_checks(_scaling_table(u_ratio=1.5), ForceSpec(), [], [])
    assert [c["check"] for c in within] == ["baseline_C_u", "baseline_C_w"]
    assert all(c["passed"] for c in within)
    outside = pipeline._baseline_checks(_scaling_table(u_ratio=3.0), ForceSpec(), [], [])
    assert not outside[0]["passed"] and outside[1]["passed"]


def test_record_baseline_requires_full_validation(tmp_path):
    with pytest.raises(ConfigError, match="record_baseline"):
        load_run_config(_config(tmp_path), {"validation.record_baseline": True})


def test_shipped_baseline_matches_the_default_setup():
    app = get_config().app
    golden = json.loads(app.golden_baseline.read_text(encoding="utf-8"))
    rc = load_run_config(app.default_config)
    assert golden["eps"] == max(rc.validation.eps)
    assert golden["m"] == rc.validation.m
    assert golden["params"] == rc.params.physical().to_dict()
    assert golden["obstacle"] == rc.geometry.obstacle().to_dict()
    forces = ForceSpec(rc.macro.f_preset, rc.macro.g_preset, rc.macro.f_value, rc.macro.g_value)
    assert golden["forces"] == forces.key()
