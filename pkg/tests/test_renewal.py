import math

import numpy as np
import pytest
from scipy.special import ndtr

from front_deviations.core.errors import ModelError, RenewalError
from front_deviations.core.model import BranchingModel
from front_deviations.core.pde import WindowSpec, evolve, front_position, read_snapshots
from front_deviations.core.renewal import FreeSemigroup, amplitude_below_W, renewal_grid, solve_renewal
from front_deviations.utils.config import Tolerances


@pytest.fixture(scope="module")
def binary_table():
    x, t = renewal_grid(16.0)
    return solve_renewal(BranchingModel.bbm(2), x, t)


def test_grid_holds_origin():
    x, t = renewal_grid(1.0, dx=0.1, dt=0.25, x_min=-3.05, x_max=2.0)
    assert np.any(np.abs(x) < 1e-12)
    assert x[0] <= -3.05 and x[-1] >= 2.0
    np.testing.assert_allclose(t, [0.0, 0.25, 0.5, 0.75, 1.0])


def test_free_motion_is_heat_flow(free_motion):
    x, t = renewal_grid(1.0, dx=0.05, dt=0.01, x_min=-15.0, x_max=15.0)
    table = solve_renewal(free_motion, x, t)
    inside = np.abs(x) < 6.0
    np.testing.assert_allclose(table.row(1.0)[inside], ndtr(x[inside] / math.sqrt(2.0)), atol=2e-3)


def test_semigroup_of_jumps_preserves_constants(asymmetric):
    x = np.linspace(-10.0, 10.0, 401)
    semigroup = FreeSemigroup(asymmetric, x)
    np.testing.assert_allclose(semigroup.apply(np.ones_like(x), 0.7), 1.0, atol=1e-12)
    v = np.where(x > 0, 1.0, 0.0)
    np.testing.assert_array_equal(semigroup.apply(v, 0.0), v)


def test_table_is_a_distribution_in_x(binary_table):
    u = binary_table.u
    assert np.all((u >= 0.0) & (u <= 1.0))
    assert np.all(np.diff(u[1:], axis=1) >= -1e-12)
    assert binary_table.corrections.max() < 1e-2


def test_right_end_stays_saturated(binary_table):
    # u = 1 is unstable under branching; round-off there must not grow over the run
    assert np.all(binary_table.u[:, -1] == 1.0)
    assert np.all(1.0 - binary_table.u[:, -40:] < 1e-9)


def test_no_branching_lower_bound(binary_table):
    x = np.linspace(-10.0, 15.0, 51)
    bound = binary_table.lower_bound(x, 6.0, 2.0)
    assert np.all(bound <= binary_table.u_at(x, 6.0) + 1e-6)
    with pytest.raises(ValueError):
        binary_table.lower_bound(x, 2.0, 6.0)
    with pytest.raises(ValueError, match="time grid"):
        binary_table.row(1.005)


def test_table_file(tmp_path, binary_table):
    binary_table.save(tmp_path / "table.bin")
    snaps = read_snapshots(tmp_path / "table.bin")
    assert len(snaps) == binary_table.t.size
    assert snaps[-1].t == pytest.approx(16.0)
    assert np.all(snaps[-1].logu <= 0.0)


@pytest.mark.parametrize("t", [np.array([0.0]), np.array([0.5, 1.0]), np.array([0.0, 0.1, 0.3])])
def test_bad_time_grids(bbm2, t):
    x = np.linspace(-5.0, 5.0, 101)
    with pytest.raises(ModelError):
        solve_renewal(bbm2, x, t)


def test_picard_tolerance(bbm2):
    x, t = renewal_grid(1.0, dt=0.5, x_min=-10.0, x_max=10.0)
    with pytest.raises(RenewalError, match="Picard"):
        solve_renewal(bbm2, x, t, Tolerances(picard=1e-12))


def test_below_w_amplitude(bbm2, binary_table):
    result = amplitude_below_W(bbm2, -3.0, binary_table)
    assert result.psi == pytest.approx(3.25)
    assert result.theta == -0.5
    assert result.bracket > 0
    assert result.amplitude == pytest.approx(result.bracket * math.sqrt(0.5 / (2.0 * math.pi)))
    assert result.tail_bound <= 0.05 * result.integral
    assert result.to_dict()["prediction_coefficients"]["psi"] == result.psi


def test_amplitude_needs_c_below_w(bbm2, binary_table):
    with pytest.raises(ModelError, match="below-W"):
        amplitude_below_W(bbm2, 0.0, binary_table)


def test_amplitude_needs_long_enough_table(bbm2):
    x, t = renewal_grid(2.0)
    table = solve_renewal(bbm2, x, t)
    with pytest.raises(RenewalError, match="extend"):
        amplitude_below_W(bbm2, -3.0, table, t_star=4.0)


@pytest.mark.slow
def test_renewal_agrees_with_pde(bbm2):
    table = solve_renewal(bbm2, *renewal_grid(5.0, dx=0.025, dt=0.005, x_min=-40.0, x_max=40.0))
    *_, snap = evolve(bbm2, 5.0, 0.025, 0.005, window=WindowSpec(c_min=-4.0))
    for x in (-2.0, 0.0, 2.0, 5.0):
        assert table.u_at(x, 5.0) == pytest.approx(math.exp(snap.log_value(x)), abs=1e-4)
    row = table.row(5.0)
    assert np.interp(0.5, row, table.x) == pytest.approx(front_position(snap), abs=0.01)
