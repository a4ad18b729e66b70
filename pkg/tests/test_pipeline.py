import json
import math

import pytest

from front_deviations.core.analysis import DeviationEstimate
from front_deviations.core.model import BranchingModel
from front_deviations.core.pipeline import (
    DEFAULT_PARAMS,
    PipelineState,
    mary_closed_forms,
    mary_psi,
    pipeline,
    scan_checks,
    stage_mc,
    stage_rates,
)
from front_deviations.core.spectral import Regime, front_constants, psi, regime
from front_deviations.utils.config import RunConfig


@pytest.mark.parametrize("m", [2, 3, 5])
def test_closed_forms_match_the_solvers(m):
    model = BranchingModel.bbm(m)
    constants = front_constants(model)
    for key, value in mary_closed_forms(m).items():
        assert getattr(constants, key) == pytest.approx(value, abs=1e-10)
    for c in (-4.0, -1.0, 0.0, 1.0, 5.0):
        assert mary_psi(m, c) == pytest.approx(psi(model, c), abs=1e-10)


def test_binary_psi_values():
    assert mary_psi(2, 0.0) == pytest.approx(2.0 * (math.sqrt(2.0) - 1.0))
    assert mary_psi(2, -2.0) == 2.0
    assert mary_psi(2, 3.0) == 1.25


def test_rates_stage(tmp_path, bbm2):
    state = PipelineState(model=bbm2, params=dict(DEFAULT_PARAMS), out_dir=tmp_path, workers=1, seed=0)
    stage_rates(state)
    assert state.constants.v_c == pytest.approx(2.0)
    assert (tmp_path / "rates.csv").is_file()
    assert json.loads((tmp_path / "constants.json").read_text(encoding="utf-8"))["theta"] > 0
    # identity row, five closed forms, three psi values
    assert len(state.rows) == 9
    assert all(row.status(state.threshold) == "pass" for row in state.rows)


def test_rates_stage_without_closed_forms(tmp_path, two_atom):
    state = PipelineState(model=two_atom, params=dict(DEFAULT_PARAMS), out_dir=tmp_path, workers=1, seed=0)
    stage_rates(state)
    assert len(state.rows) == 1


@pytest.mark.slow
def test_full_pipeline(tmp_path, bbm2):
    config = RunConfig("pipeline", output_dir=tmp_path, params={"mc_n": 20_000}, model=bbm2)
    status = pipeline(config)
    assert status in (0, 1)
    report = json.loads((tmp_path / "acceptance.json").read_text(encoding="utf-8"))
    assert report["exit_status"] == status
    analytic = [row for row in report["rows"] if row["check"] in ("constants", "psi", "wave")]
    assert analytic and all(row["status"] == "pass" for row in analytic)
    for name in ("rates.csv", "wave.csv", "trace.csv", "ray_+0.csv", "mc.csv"):
        assert (tmp_path / name).is_file()


def test_rates_stage_ternary(tmp_path, bbm3):
    state = PipelineState(model=bbm3, params=dict(DEFAULT_PARAMS), out_dir=tmp_path, workers=1, seed=0)
    stage_rates(state)
    assert state.constants.v_c == pytest.approx(2.0 * math.sqrt(2.0))
    assert len(state.rows) == 9
    assert {row.check for row in state.rows} == {"constants", "psi"}
    assert all(row.status(state.threshold) == "pass" for row in state.rows)


def test_default_velocities_cover_every_regime(bbm2):
    tags = [regime(bbm2, c) for c in DEFAULT_PARAMS["c"]]
    assert tags.count(Regime.INTERMEDIATE) == 3
    assert Regime.BELOW in tags and Regime.ABOVE in tags


def intermediate_fits(model, theta_shift=0.0, curvature=0.0):
    constants = front_constants(model)
    fits = []
    for i, c in enumerate((0.0, 0.5, 1.0)):
        psi_true = (constants.v_c - c) * constants.eta
        fits.append(DeviationEstimate(
            c=c, regime=Regime.INTERMEDIATE, source="pde",
            psi_theory=psi_true, psi_fit=psi_true + curvature * c * c, psi_err=1e-4,
            theta_theory=constants.theta, theta_fit=constants.theta + (theta_shift if i == 2 else 0.0),
            theta_err=0.01,
        ))
    return fits


@pytest.fixture
def scan_state(tmp_path, bbm2):
    state = PipelineState(model=bbm2, params=dict(DEFAULT_PARAMS), out_dir=tmp_path, workers=1, seed=0)
    state.constants = front_constants(bbm2)
    return state


def test_scan_checks_pass_on_consistent_fits(scan_state, bbm2):
    scan_checks(scan_state, intermediate_fits(bbm2))
    checks = [row.check for row in scan_state.rows]
    assert checks.count("theta_consistency") == 3
    assert checks.count("psi_scan") == 2
    assert all(row.status(scan_state.threshold) == "pass" for row in scan_state.rows)
    jump = next(row for row in scan_state.rows if row.quantity == "slope jump at v_c")
    assert jump.theory == pytest.approx(1.0 + math.sqrt(2.0) - 1.0, abs=1e-8)


def test_scan_checks_flag_a_drifting_theta(scan_state, bbm2):
    scan_checks(scan_state, intermediate_fits(bbm2, theta_shift=0.5))
    failed = {row.quantity for row in scan_state.rows if row.status(scan_state.threshold) == "fail"}
    assert failed == {"theta(c=0) - theta(c=1)", "theta(c=0.5) - theta(c=1)"}


def test_scan_checks_flag_a_curved_psi(scan_state, bbm2):
    scan_checks(scan_state, intermediate_fits(bbm2, curvature=0.2))
    statuses = {row.quantity: row.status(scan_state.threshold) for row in scan_state.rows}
    assert statuses["slope through W"] == "fail"
    assert statuses["slope jump at v_c"] == "fail"


def test_scan_checks_need_two_velocities(scan_state, bbm2):
    scan_checks(scan_state, intermediate_fits(bbm2)[:1])
    assert scan_state.rows == []


def test_stages_are_reproducible(tmp_path, bbm2):
    params = {**DEFAULT_PARAMS, "mc_n": 2_000, "oracle_t": 1.0}
    outputs = []
    for name, workers in (("first", 1), ("second", 2)):
        out = tmp_path / name
        out.mkdir()
        state = PipelineState(model=bbm2, params=params, out_dir=out, workers=workers, seed=7)
        stage_rates(state)
        state.oracle = {"pde": [0.5] * 4, "renewal": [0.5] * 4}
        stage_mc(state)
        outputs.append({f: (out / f).read_bytes() for f in ("rates.csv", "constants.json", "mc.csv")})
    assert outputs[0] == outputs[1]


@pytest.mark.slow
def test_full_pipeline_is_byte_identical(tmp_path, bbm2):
    params = {"mc_n": 20_000}
    for name in ("a", "b"):
        pipeline(RunConfig("pipeline", output_dir=tmp_path / name, params=params, model=bbm2, seed=3))
    for f in ("acceptance.csv", "acceptance.json", "trace.csv", "wave.csv", "mc.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
