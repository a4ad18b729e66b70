import math

import numpy as np
import pytest
from scipy import stats

from front_deviations.core.errors import ModelError, MonteCarloError, PopulationCapError
from front_deviations.core.montecarlo import (
    SimConfig,
    block_rng,
    estimate_cdf,
    estimate_mean_max,
    is_mirror_symmetric,
    simulate_batch,
    simulate_once,
)


def test_block_streams_are_reproducible():
    a = block_rng(7, 3).random(5)
    np.testing.assert_array_equal(a, block_rng(7, 3).random(5))
    assert not np.array_equal(a, block_rng(7, 4).random(5))
    assert not np.array_equal(a, block_rng(8, 3).random(5))


def test_without_branching_the_maximum_is_gaussian(free_motion):
    result = simulate_batch(free_motion, 2.0, 20_000, block_rng(1, 0))
    assert np.all(result.population == 1)
    assert np.all(np.isinf(result.first_branch))
    np.testing.assert_array_equal(result.x_max, result.x_min)
    assert stats.kstest(result.x_max, stats.norm(scale=2.0).cdf).pvalue > 1e-3


def test_first_branch_time_is_exponential(bbm2):
    t = 3.0
    result = simulate_batch(bbm2, t, 20_000, block_rng(2, 0))
    first = result.first_branch
    assert np.mean(np.isinf(first)) == pytest.approx(math.exp(-t), abs=0.01)
    assert stats.kstest(first[np.isfinite(first)], stats.truncexpon(b=t).cdf).pvalue > 1e-3


@pytest.mark.parametrize("name, t", [("bbm2", 2.0), ("mixed_offspring", 1.5)])
def test_mean_population_grows_like_exp_beta_t(name, t, request):
    model = request.getfixturevalue(name)
    result = simulate_batch(model, t, 20_000, block_rng(3, 0))
    expected = math.exp(model.beta * t)
    spread = result.population.std() / math.sqrt(result.population.size)
    assert result.population.mean() == pytest.approx(expected, abs=5.0 * spread)
    assert np.all(result.x_max >= result.x_min)


def test_jumps_move_on_the_lattice(two_atom):
    result = simulate_batch(two_atom, 2.0, 500, block_rng(4, 0))
    np.testing.assert_array_equal(result.x_max, np.rint(result.x_max))


def test_simulate_once(bbm2):
    assert math.isfinite(simulate_once(bbm2, 1.0, block_rng(5, 0)))
    with pytest.raises(PopulationCapError):
        simulate_once(bbm2, 20.0, block_rng(5, 0), population_cap=1)


def test_free_cdf_estimate(free_motion):
    config = SimConfig(free_motion, 2.0, 8_000, seed=11, block_size=1000)
    (est,) = estimate_cdf(config, [0.0])
    assert est.n_eff == 8_000
    assert est.aborts == 0
    assert est.estimate == pytest.approx(0.5, abs=4.0 * est.stderr)
    mean, err, n = estimate_mean_max(config)
    assert n == 8_000
    assert mean == pytest.approx(0.0, abs=4.0 * err)


def test_cdf_saturates_far_right(bbm2):
    rows = estimate_cdf(SimConfig(bbm2, 1.0, 500, seed=3), [-50.0, 50.0])
    assert rows[0].estimate == 0.0
    assert rows[1].estimate == 1.0
    assert rows[1].stderr == 0.0
    assert rows[1].to_dict()["x"] == 50.0


def test_results_do_not_depend_on_workers(bbm2):
    config = SimConfig(bbm2, 2.0, 1_000, seed=42, block_size=250)
    x = [0.0, 1.0, 3.0]
    assert estimate_cdf(config, x, workers=1) == estimate_cdf(config, x, workers=2)


def test_block_layout(bbm2):
    config = SimConfig(bbm2, 1.0, 2_500, block_size=1_000)
    assert config.blocks == 3
    assert [config.block_samples(i) for i in range(3)] == [1_000, 1_000, 500]


def test_antithetic_pairs(two_atom, asymmetric):
    assert is_mirror_symmetric(two_atom)
    assert not is_mirror_symmetric(asymmetric)
    config = SimConfig(two_atom, 2.0, 2_000, seed=9, antithetic=True, block_size=500)
    (row,) = estimate_cdf(config, [1.5])
    plain = estimate_cdf(SimConfig(two_atom, 2.0, 2_000, seed=9, block_size=500), [1.5])[0]
    assert row.n_eff == 2_000
    assert row.estimate == pytest.approx(plain.estimate, abs=4.0 * math.hypot(row.stderr, plain.stderr))


@pytest.mark.parametrize("kwargs, message", [
    ({"n": 0}, "sample count"),
    ({"t": 0.0}, "horizon"),
    ({"t": 20.0}, "cap"),
    ({"antithetic": True, "n": 3}, "even"),
])
def test_config_validation(bbm2, kwargs, message):
    params = {"model": bbm2, "t": 1.0, "n": 10, **kwargs}
    with pytest.raises(ModelError, match=message):
        SimConfig(**params)


def test_antithetic_needs_symmetry(asymmetric):
    with pytest.raises(ModelError, match="mirror"):
        SimConfig(asymmetric, 1.0, 10, antithetic=True)


def test_too_many_capped_samples(bbm2):
    config = SimConfig(bbm2, 2.0, 200, seed=1, population_cap=10)
    with pytest.raises(MonteCarloError, match="population cap"):
        estimate_cdf(config, [0.0])


def test_settings_feed_the_config(bbm2, fresh_settings):
    fresh_settings.set("mc", "block_size", 64)
    config = SimConfig.from_settings(bbm2, 1.0, 100, seed=5)
    assert config.block_size == 64
    assert config.blocks == 2
