import math

import numpy as np
import pytest

from front_deviations.core.errors import SchemeError
from front_deviations.core.stepping import (
    RkcCoefficients,
    rkc2_step,
    rkc_stages,
    shift_index,
    shifted_values,
    ssp_rk2_step,
)


def _decay(step, dt: float) -> float:
    y = np.array([1.0])
    for _ in range(int(round(1.0 / dt))):
        y = step(y, dt)
    return abs(float(y[0]) - math.exp(-1.0))


def test_ssp_rk2_is_second_order():
    step = lambda y, dt: ssp_rk2_step(y, dt, lambda v: -v)
    coarse, fine = _decay(step, 0.02), _decay(step, 0.01)
    assert fine < 1e-4
    assert 3.0 < coarse / fine < 5.0


def test_rkc2_is_second_order():
    step = lambda y, dt: rkc2_step(y, dt, lambda v: -v, stages=3)
    coarse, fine = _decay(step, 0.02), _decay(step, 0.01)
    assert fine < 1e-4
    assert 3.0 < coarse / fine < 5.0


def test_rkc2_damps_the_stability_interval():
    s = 10
    coefficients = RkcCoefficients.build(s)
    for z in np.linspace(-0.6 * s**2, 0.0, 400):
        y = rkc2_step(np.array([1.0]), 1.0, lambda v: z * v, s, coefficients)
        assert abs(y[0]) <= 1.0 + 1e-12


def test_stage_count_covers_the_spectral_radius():
    for radius in (1.0, 50.0, 4e3):
        s = rkc_stages(0.1, radius)
        assert s >= 2
        assert 0.65 * s**2 >= 0.1 * radius
    with pytest.raises(SchemeError, match="reduce dt"):
        rkc_stages(1.0, 1e6)


def test_heat_equation_with_stiff_steps():
    dx, dt = 0.1, 0.05
    x = np.arange(-10.0, 10.0 + dx / 2, dx)
    u = np.exp(-x**2)

    def rhs(v):
        out = np.zeros_like(v)
        out[1:-1] = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / dx**2
        return out

    stages = rkc_stages(dt, 4.0 / dx**2)
    coefficients = RkcCoefficients.build(stages)
    for _ in range(20):
        u = rkc2_step(u, dt, rhs, stages, coefficients)
    np.testing.assert_allclose(u, np.exp(-x**2 / 5.0) / math.sqrt(5.0), atol=2e-3)


@pytest.mark.parametrize("displacement, dx, expected", [
    (0.1, 0.05, (-2, 0.0)),
    (-0.075, 0.05, (1, 0.5)),
    (0.0, 0.05, (0, 0.0)),
    (-0.05 * (1 - 1e-12), 0.05, (1, 0.0)),
])
def test_shift_index(displacement, dx, expected):
    m, frac = shift_index(displacement, dx)
    assert m == expected[0]
    assert frac == pytest.approx(expected[1], abs=1e-9)


def test_shifted_values_are_exact_for_linear_fields():
    dx, n, pad = 0.05, 40, 5
    x = dx * np.arange(-pad, n + pad)
    padded = 2.0 * x + 1.0
    for y in (0.1, -0.075, 0.0333):
        m, frac = shift_index(y, dx)
        values = shifted_values(padded, pad, n, m, frac)
        np.testing.assert_allclose(values, 2.0 * (dx * np.arange(n) - y) + 1.0, atol=1e-12)
