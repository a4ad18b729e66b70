import math

import numpy as np
import pytest
from scipy.special import ndtr

from front_deviations.core.errors import FitError, SchemeError, WindowError
from front_deviations.core.model import BranchingModel
from front_deviations.core.pde import (
    FieldSnapshot,
    WindowSpec,
    evolve,
    extract_A,
    fit_log_coefficient,
    front_position,
    read_snapshots,
    run_evolution,
    tail_sample,
    write_snapshots,
)


def logistic_snapshot(t=1.0, centre=3.0, dx=0.05):
    x = np.arange(-20.0, 20.0 + dx / 2, dx)
    return FieldSnapshot(t, float(x[0]), dx, -np.logaddexp(0.0, -(x - centre)))


def synthetic_trace(A=-1.2, kappa=1.5, sub=0.3):
    t = np.geomspace(10.0, 1000.0, 60)
    return np.column_stack((t, 2.0 * t - kappa * np.log(t) + A + sub / np.sqrt(t)))


@pytest.fixture(scope="module")
def binary_run():
    return run_evolution(BranchingModel.bbm(2), 20.0, 0.05, 0.05, rays=[0.0, -2.0], dump_times=[5.0],
                         extra_levels=[0.3], window=WindowSpec(c_min=-2.5), keep_snapshots=True)


def test_snapshot_file_round_trip(tmp_path):
    snaps = [logistic_snapshot(1.0), logistic_snapshot(2.0, centre=5.0)]
    write_snapshots(tmp_path / "field.bin", snaps)
    loaded = read_snapshots(tmp_path / "field.bin")
    assert [s.t for s in loaded] == [1.0, 2.0]
    np.testing.assert_array_equal(loaded[1].logu, snaps[1].logu)
    assert loaded[0].x_hi == pytest.approx(snaps[0].x_hi)
    snaps[0].save(tmp_path / "one.bin")
    assert FieldSnapshot.load(tmp_path / "one.bin").dx == 0.05
    with pytest.raises(ValueError, match="expected one"):
        FieldSnapshot.load(tmp_path / "field.bin")


def test_log_value_window():
    snap = logistic_snapshot()
    assert snap.log_value(30.0) == 0.0
    assert snap.log_value(3.0) == pytest.approx(-math.log(2.0), abs=1e-12)
    with pytest.raises(WindowError, match="left of the window"):
        snap.log_value(-25.0)


def test_front_position_levels():
    snap = logistic_snapshot()
    assert front_position(snap) == pytest.approx(3.0, abs=1e-6)
    # logistic: u = q at x = centre + log(q / (1 - q))
    assert front_position(snap, 0.3) == pytest.approx(3.0 + math.log(0.3 / 0.7), abs=1e-5)
    with pytest.raises(ValueError):
        front_position(snap, 1.0)
    with pytest.raises(WindowError):
        front_position(logistic_snapshot(centre=40.0), 0.5)


def test_tail_sample_rows():
    snaps = [logistic_snapshot(1.0), logistic_snapshot(2.0)]
    rows = tail_sample(snaps, 1.5)
    assert rows.shape == (2, 2)
    assert rows[1, 1] == pytest.approx(snaps[1].log_value(3.0))


def test_free_motion_is_heat_flow(free_motion):
    window = WindowSpec(c_min=-4.0, margin_left=20.0, margin_right=20.0)
    *_, last = evolve(free_motion, 2.0, 0.05, 0.01, window=window)
    assert last.t == pytest.approx(2.0)
    x = last.x
    inside = np.abs(x) < 6.0
    np.testing.assert_allclose(last.u[inside], ndtr(x[inside] / 2.0), atol=5e-3)


def test_needs_linear_start_phase(bbm2):
    with pytest.raises(SchemeError, match="t_switch"):
        next(evolve(bbm2, 1.0, 0.05, 0.05, t_switch=0.0))
    with pytest.raises(SchemeError):
        next(evolve(bbm2, 1.0, 0.0, 0.05))


def test_binary_front_position(binary_run):
    t, x = binary_run.trace[-1]
    assert t == pytest.approx(20.0)
    assert x == pytest.approx(40.0 - 1.5 * math.log(20.0), abs=3.0)
    assert np.all(np.diff(binary_run.trace[:, 1]) > 0)


def test_binary_snapshots_are_monotone(binary_run):
    for snap in binary_run.snapshots:
        assert np.all(snap.logu <= 0.0)
        assert np.all(np.diff(snap.logu) >= -1e-9 * np.maximum(1.0, np.abs(snap.logu[1:])))


def test_run_collects_rays_dumps_and_levels(binary_run):
    assert [s.t for s in binary_run.dumps] == [5.0]
    assert set(binary_run.rays) == {0.0, -2.0}
    ray = binary_run.rays[0.0]
    assert ray.shape == (len(binary_run.trace), 2)
    assert np.all(np.diff(ray[:, 1]) < 0)
    # deeper rays decay faster
    assert np.all(binary_run.rays[-2.0][:, 1] < ray[:, 1])
    lower = binary_run.level_traces[0.3]
    assert np.all(lower[:, 1] < binary_run.trace[:, 1])


def test_extract_A_on_synthetic_trace(bbm2):
    fit = extract_A(synthetic_trace(), bbm2, t_min=10.0)
    assert fit.A == pytest.approx(-1.2, abs=1e-7)
    assert fit.subleading == pytest.approx(0.3, abs=1e-7)
    assert fit.kappa == pytest.approx(1.5)
    assert fit.to_dict()["n"] == 60


def test_log_coefficient_on_synthetic_trace(bbm2):
    fit = fit_log_coefficient(synthetic_trace(kappa=1.4), bbm2, t_min=10.0)
    assert fit.kappa == pytest.approx(1.4, abs=1e-7)
    assert fit.A == pytest.approx(-1.2, abs=1e-7)


def test_short_trace_is_rejected(bbm2):
    trace = synthetic_trace()
    with pytest.raises(FitError, match="decade"):
        extract_A(trace[trace[:, 0] < 50.0], bbm2, t_min=10.0)
    noisy = synthetic_trace()
    noisy[::2, 1] += 0.5
    with pytest.raises(FitError, match="residual"):
        extract_A(noisy, bbm2, t_min=10.0)


@pytest.mark.slow
def test_bramson_shift_for_binary_branching(bbm2):
    result = run_evolution(bbm2, 200.0, 0.05, 0.05, window=WindowSpec(c_min=-1.0))
    fit = extract_A(result.trace, bbm2)
    assert fit.uncertainty < 0.02
    kappa = fit_log_coefficient(result.trace, bbm2)
    assert kappa.kappa == pytest.approx(1.5, rel=0.03)


def test_default_settings_run(bbm2):
    result = run_evolution(bbm2, 5.0, 0.05, 0.05, keep_snapshots=True)
    assert np.all(np.isfinite(result.trace))
    t, x = result.trace[-1]
    assert t == pytest.approx(5.0)
    assert x == pytest.approx(10.0 - 1.5 * math.log(5.0), abs=3.0)
    last = result.snapshots[-1]
    assert np.all(np.isfinite(last.logu))
    assert np.all(np.diff(last.logu) >= -1e-9 * np.maximum(1.0, np.abs(last.logu[1:])))


def test_front_converges_under_grid_refinement(bbm2):
    window = WindowSpec(c_min=-2.5)
    coarse = run_evolution(bbm2, 10.0, 0.1, 0.05, window=window)
    fine = run_evolution(bbm2, 10.0, 0.05, 0.05, window=window)
    np.testing.assert_allclose(coarse.trace[:, 0], fine.trace[:, 0])
    assert np.max(np.abs(coarse.trace[:, 1] - fine.trace[:, 1])) < 0.02


def test_ordered_initial_data_stay_ordered(bbm2):
    window = WindowSpec(c_min=-2.5)
    step = lambda x: np.where(x > 0, 1.0, np.where(x < 0, 0.0, 0.5))
    raised = lambda x: np.where(x > 0, 1.0, np.where(x > -2.0, 0.5, 0.0))
    *_, low = evolve(bbm2, 3.0, 0.05, 0.05, window=window, initial=step)
    *_, high = evolve(bbm2, 3.0, 0.05, 0.05, window=window, initial=raised)
    assert low.x_lo == pytest.approx(high.x_lo)
    inside = slice(100, -100)
    assert np.all(low.logu[inside] <= high.logu[inside] + 1e-6)
    assert np.any(high.logu[inside] > low.logu[inside] + 1e-3)


def test_step_solution_decreases_in_time(binary_run):
    snaps = binary_run.snapshots
    for earlier, later in zip(snaps, snaps[1:]):
        offset = int(round((earlier.x_lo - later.x_lo) / later.dx))
        n = min(earlier.logu.size, later.logu.size - offset)
        # the left edge of the earlier window sits on the floor
        assert np.all(later.logu[offset + 100:offset + n] <= earlier.logu[100:n] + 1e-6)
