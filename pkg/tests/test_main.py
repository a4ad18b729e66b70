import json
import math

import pytest

from front_deviations.core.analysis import assemble_prediction
from front_deviations.core.errors import ConfigError, ModelError, WaveError
from front_deviations.core.model import BranchingModel
from front_deviations.main import (
    EXIT_CONFIG,
    EXIT_NUMERICAL,
    EXIT_OK,
    exit_code,
    main,
    parse_and_validate,
)
from front_deviations.utils.config import RunConfig

from .test_analysis import tail_series


@pytest.fixture
def model_file(tmp_path):
    path = tmp_path / "binary.json"
    BranchingModel.bbm(2).save(path)
    return path


def test_missing_model_file(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    status = main(["--out", str(tmp_path), "rates", "--model", str(missing)], env={})
    assert status == EXIT_CONFIG
    assert str(missing) in capsys.readouterr().err


def test_invalid_model_file(tmp_path):
    path = tmp_path / "single.json"
    path.write_text('{"diffusion": 1.0, "offspring": [{"k": 1, "rate": 1.0}]}', encoding="utf-8")
    with pytest.raises(ConfigError, match="k >= 2"):
        parse_and_validate(["rates", "--model", str(path)], env={})
    assert main(["--out", str(tmp_path), "rates", "--model", str(path)], env={}) == EXIT_CONFIG


def test_model_is_loaded(model_file):
    config = parse_and_validate(["rates", "--model", str(model_file)], env={})
    assert config.command == "rates"
    assert config.model.alpha == 1.0
    assert config.model.beta == 1.0
    assert config.params["step"] == 0.05


def test_setting_precedence(tmp_path, model_file):
    settings = tmp_path / "settings.json"
    settings.write_text('{"tolerances": {"zscore": 3.0}}', encoding="utf-8")
    argv = ["--config", str(settings), "rates", "--model", str(model_file)]
    assert parse_and_validate(argv, env={}).settings.tolerances.zscore == 3.0
    env = {"FRONT_DEVIATIONS_TOLERANCES__ZSCORE": "5"}
    assert parse_and_validate(argv, env=env).settings.tolerances.zscore == 5.0
    argv = ["--config", str(settings), "--set", "tolerances.zscore=6", "rates", "--model", str(model_file)]
    assert parse_and_validate(argv, env=env).settings.tolerances.zscore == 6.0


@pytest.mark.parametrize("argv", [
    ["--set", "tolerances.nope=1", "pipeline"],
    ["--set", "zscore=1", "pipeline"],
    ["--set", "tolerances.zscore=abc", "pipeline"],
    ["pipeline", "--workers", "0"],
    ["pipeline", "--mc-n", "0"],
    ["rates"],
    [],
])
def test_configuration_errors(argv):
    with pytest.raises(ConfigError):
        parse_and_validate(argv, env={})


def test_mc_sample_count(model_file):
    with pytest.raises(ConfigError, match="--n"):
        parse_and_validate(["mc", "--model", str(model_file), "--t", "1", "--x", "0", "--n", "0"], env={})


def test_pipeline_dry_run(tmp_path):
    status = main(["--out", str(tmp_path), "pipeline", "--dry-run", "--t-end", "50"], env={})
    assert status == EXIT_OK
    plan = json.loads((tmp_path / "plan.json").read_text(encoding="utf-8"))
    assert plan["stages"] == ["rates", "wave", "evolve", "renewal", "mc", "analyze"]
    assert plan["params"]["t_end"] == 50.0
    restored = RunConfig.from_dict(plan["config"])
    assert restored.command == "pipeline"
    assert restored.dry_run


def test_rates_command(tmp_path, model_file):
    status = main(["--out", str(tmp_path), "rates", "--model", str(model_file), "--c=-3,0,3"], env={})
    assert status == EXIT_OK
    lines = (tmp_path / "rates.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "c,regime,psi,theta,notes"
    assert len(lines) == 4
    constants = json.loads((tmp_path / "constants.json").read_text(encoding="utf-8"))
    assert constants["v_c"] == pytest.approx(2.0)
    assert constants["model"]["offspring"] == [{"k": 2, "rate": 1.0}]


def test_mc_command(tmp_path, model_file):
    argv = ["--out", str(tmp_path), "mc", "--model", str(model_file), "--t", "1", "--x", "0,2",
            "--n", "300", "--seed", "4"]
    assert main(argv, env={}) == EXIT_OK
    data = json.loads((tmp_path / "mc.json").read_text(encoding="utf-8"))
    assert data["seed"] == 4
    assert [row["n_eff"] for row in data["rows"]] == [300, 300]


def test_analyze_command(tmp_path, model_file):
    model = BranchingModel.bbm(2)
    prediction = assemble_prediction(model, 0.0, A=0.5, B=2.0)
    rays = tmp_path / "rays"
    rays.mkdir()
    series = tail_series(prediction.psi, prediction.theta, math.log(prediction.amplitude))
    lines = ["t,log_u"] + [f"{float(t)!r},{float(y)!r}" for t, y in series]
    (rays / "ray_+0.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    constants = tmp_path / "constants.json"
    constants.write_text('{"A": 0.5, "B": 2.0}', encoding="utf-8")
    out = tmp_path / "out"
    argv = ["--out", str(out), "analyze", "--model", str(model_file), "--in", str(rays),
            "--c", "0,3", "--constants", str(constants)]
    assert main(argv, env={}) == EXIT_OK
    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert report["failures"] == 0
    assert report["incomparable"] == 3


def test_analyze_missing_series(tmp_path, model_file):
    argv = ["--out", str(tmp_path), "analyze", "--model", str(model_file), "--in", str(tmp_path),
            "--c", "-3", "--constants", str(tmp_path / "absent.json")]
    assert main(argv, env={}) == EXIT_CONFIG


def test_exit_codes():
    assert exit_code(ModelError("bad")) == EXIT_CONFIG
    assert exit_code(ConfigError("bad")) == EXIT_CONFIG
    assert exit_code(WaveError("unconverged")) == EXIT_NUMERICAL


def test_rates_velocity_grid(tmp_path, model_file):
    argv = ["--out", str(tmp_path), "rates", "--model", str(model_file), "--c-grid=-4:4:9"]
    assert main(argv, env={}) == EXIT_OK
    lines = (tmp_path / "rates.csv").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 10
    assert lines[1].startswith("-4.0,")


@pytest.mark.parametrize("grid", ["1:2", "a:b:3", "0:1:0"])
def test_rates_bad_velocity_grid(model_file, grid):
    with pytest.raises(ConfigError):
        parse_and_validate(["rates", "--model", str(model_file), f"--c-grid={grid}"], env={})


def test_evolve_command(tmp_path, model_file):
    argv = ["--out", str(tmp_path), "evolve", "--model", str(model_file), "--t-end", "3", "--rays", "0"]
    assert main(argv, env={}) == EXIT_OK
    lines = (tmp_path / "trace.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "t,x_half"
    assert len(lines) == 4
    assert (tmp_path / "ray_+0.csv").read_text(encoding="utf-8").startswith("t,log_u")
    assert json.loads((tmp_path / "evolve.json").read_text(encoding="utf-8"))["outputs"] == 3
