"""Event-driven simulation of the branching process and Monte Carlo estimators."""

import logging
import math
from dataclasses import asdict, dataclass
from multiprocessing import Pool

import numpy as np

from ..utils.config import Tolerances, get_settings
from ..utils.log import fields
from .errors import ModelError, MonteCarloError, PopulationCapError
from .model import BranchingModel

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimConfig:
    """One Monte Carlo experiment.

    With ``antithetic`` each simulated tree yields two samples, its maximum and
    its mirrored minimum; this needs a mirror-symmetric model.
    """
    model: BranchingModel
    t: float
    n: int
    seed: int = 0
    population_cap: int = 10_000_000
    antithetic: bool = False
    block_size: int = 1024

    def __post_init__(self):
        if self.n < 1:
            raise ModelError(f"sample count must be >= 1, got {self.n}")
        if not self.t > 0:
            raise ModelError(f"horizon must be positive, got {self.t}")
        if self.model.beta * self.t > math.log(self.population_cap):
            raise ModelError(f"expected population e^(beta t) = e^{self.model.beta * self.t:.3g} "
                             f"exceeds the cap {self.population_cap}")
        if self.antithetic:
            if not is_mirror_symmetric(self.model):
                raise ModelError("antithetic sampling needs a mirror-symmetric jump kernel")
            if self.block_size % 2 or self.n % 2:
                raise ModelError("antithetic sampling needs even n and block size")

    @classmethod
    def from_settings(cls, model: BranchingModel, t: float, n: int, seed: int = 0,
                      antithetic: bool = False) -> "SimConfig":
        section = get_settings().section("mc")
        return cls(model, t, n, seed, int(section["population_cap"]), antithetic,
                   int(section["block_size"]))

    @property
    def blocks(self) -> int:
        return -(-self.n // self.block_size)

    def block_samples(self, index: int) -> int:
        return min(self.block_size, self.n - index * self.block_size)


def is_mirror_symmetric(model: BranchingModel) -> bool:
    y, r = model.jumps.displacements, model.jumps.rates
    order, mirror = np.argsort(y), np.argsort(-y)
    return bool(np.allclose(y[order], -y[mirror]) and np.allclose(r[order], r[mirror]))


def block_rng(seed: int, block: int) -> np.random.Generator:
    """Counter-based stream for one block of samples, independent of the worker layout."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(block,))))


@dataclass
class BatchResult:
    """Per-sample outcomes of :func:`simulate_batch`; aborted samples hold NaN extremes."""
    x_max: np.ndarray
    x_min: np.ndarray
    population: np.ndarray
    first_branch: np.ndarray
    aborted: np.ndarray


def simulate_batch(model: BranchingModel, t: float, n: int, rng: np.random.Generator,
                   population_cap: int = 10_000_000) -> BatchResult:
    """Simulate n independent trees up to time t, all particles advanced together.

    Each particle waits an exponential time of rate alpha + lambda, diffusing
    with variance 2 D per unit time; at the event it branches (probability
    alpha / (alpha + lambda), k offspring with probability p_k / alpha) or jumps.
    """
    alpha, lam = model.alpha, model.jump_rate
    total = alpha + lam
    D = model.diffusion
    k_values = np.array([k for k, rate in model.offspring if rate > 0], dtype=np.int64)
    k_probs = np.array([rate for _, rate in model.offspring if rate > 0]) / alpha if alpha > 0 else None
    jump_y = model.jumps.displacements
    jump_p = model.jumps.rates / lam if lam > 0 else None

    pos = np.zeros(n)
    clock = np.zeros(n)
    ids = np.arange(n)
    x_max = np.full(n, -np.inf)
    x_min = np.full(n, np.inf)
    finished = np.zeros(n, dtype=np.int64)
    first = np.full(n, np.inf)
    aborted = np.zeros(n, dtype=bool)

    while pos.size:
        wait = rng.exponential(1.0 / total, pos.size) if total > 0 else np.full(pos.size, np.inf)
        done = clock + wait >= t

        if done.any():
            xf = pos[done]
            if D > 0:
                xf = xf + np.sqrt(2.0 * D * (t - clock[done])) * rng.standard_normal(xf.size)
            np.maximum.at(x_max, ids[done], xf)
            np.minimum.at(x_min, ids[done], xf)
            finished += np.bincount(ids[done], minlength=n)

        move = ~done
        p, c, s, w = pos[move], clock[move] + wait[move], ids[move], wait[move]
        if not p.size:
            break
        if D > 0:
            p = p + np.sqrt(2.0 * D * w) * rng.standard_normal(p.size)
        branch = rng.random(p.size) < alpha / total
        jumpers = ~branch
        if jumpers.any():
            p[jumpers] += rng.choice(jump_y, size=int(jumpers.sum()), p=jump_p)
        counts = np.ones(p.size, dtype=np.int64)
        if branch.any():
            counts[branch] = rng.choice(k_values, size=int(branch.sum()), p=k_probs)
            np.minimum.at(first, s[branch], c[branch])
        pos, clock, ids = np.repeat(p, counts), np.repeat(c, counts), np.repeat(s, counts)

        over = (np.bincount(ids, minlength=n) + finished) > population_cap
        if over.any():
            aborted |= over
            keep = ~aborted[ids]
            pos, clock, ids = pos[keep], clock[keep], ids[keep]

    x_max[aborted] = np.nan
    x_min[aborted] = np.nan
    return BatchResult(x_max=x_max, x_min=x_min, population=finished, first_branch=first, aborted=aborted)


def simulate_once(model: BranchingModel, t: float, rng: np.random.Generator,
                  population_cap: int = 10_000_000) -> float:
    """One sample of X_max(t).

    Raises:
        PopulationCapError: the tree outgrew the population cap.
    """
    result = simulate_batch(model, t, 1, rng, population_cap)
    if result.aborted[0]:
        raise PopulationCapError(f"population exceeded {population_cap} before t={t}")
    return float(result.x_max[0])


@dataclass
class _Tally:
    """Integer and float sums of one block, merged in block order."""
    hits: np.ndarray
    hits_sq: np.ndarray
    units: int
    aborts: int
    max_sum: float
    max_sq: float


def _unit_values(config: SimConfig, result: BatchResult) -> tuple[np.ndarray, int]:
    """Sample values grouped into independent units (single samples or antithetic pairs)."""
    ok = ~result.aborted
    if config.antithetic:
        return np.stack((result.x_max[ok], -result.x_min[ok]), axis=1), 2
    return result.x_max[ok][:, None], 1


def _run_block(task: tuple) -> _Tally:
    config, x_points, index = task
    size = config.block_samples(index)
    trees = size // 2 if config.antithetic else size
    result = simulate_batch(config.model, config.t, trees, block_rng(config.seed, index),
                            config.population_cap)
    values, per_unit = _unit_values(config, result)
    below = (values[:, :, None] < x_points[None, None, :]).sum(axis=1)
    return _Tally(
        hits=below.sum(axis=0).astype(np.int64),
        hits_sq=(below**2).sum(axis=0).astype(np.int64),
        units=int(values.shape[0]),
        aborts=int(result.aborted.sum()) * per_unit,
        max_sum=float(values.mean(axis=1).sum()),
        max_sq=float((values.mean(axis=1) ** 2).sum()),
    )


def _tally(config: SimConfig, x_points: np.ndarray, workers: int) -> _Tally:
    tasks = [(config, x_points, b) for b in range(config.blocks)]
    if workers > 1:
        with Pool(processes=workers) as pool:
            parts = pool.map(_run_block, tasks)
    else:
        parts = [_run_block(task) for task in tasks]
    merged = _Tally(np.zeros(x_points.size, dtype=np.int64), np.zeros(x_points.size, dtype=np.int64),
                    0, 0, 0.0, 0.0)
    for i, part in enumerate(parts):
        merged.hits += part.hits
        merged.hits_sq += part.hits_sq
        merged.units += part.units
        merged.aborts += part.aborts
        merged.max_sum += part.max_sum
        merged.max_sq += part.max_sq
        logger.debug("block merged", extra=fields(block=i, units=part.units, aborts=part.aborts))
    return merged


def _check_aborts(config: SimConfig, aborts: int, tolerances: Tolerances) -> None:
    if aborts > tolerances.max_abort_fraction * config.n:
        raise MonteCarloError(f"{aborts} of {config.n} samples hit the population cap "
                              f"(limit {tolerances.max_abort_fraction:.1%})")


@dataclass(frozen=True)
class CdfEstimate:
    """Monte Carlo estimate of P(X_max(t) < x)."""
    x: float
    estimate: float
    stderr: float
    n_eff: int
    aborts: int

    def to_dict(self) -> dict:
        return asdict(self)


def estimate_cdf(config: SimConfig, x_points, workers: int = 1,
                 tolerances: Tolerances | None = None) -> list[CdfEstimate]:
    """Proportions of samples with X_max(t) < x and their standard errors.

    Results depend only on (seed, n, block size), not on ``workers``.
    """
    tol = tolerances or get_settings().tolerances
    x_points = np.atleast_1d(np.asarray(x_points, dtype=float))
    tally = _tally(config, x_points, workers)
    _check_aborts(config, tally.aborts, tol)
    per_unit = 2 if config.antithetic else 1
    units = max(tally.units, 1)
    p = tally.hits / (units * per_unit)
    var = np.maximum(tally.hits_sq / (units * per_unit**2) - p**2, 0.0)
    stderr = np.sqrt(var / units)
    rows = [CdfEstimate(float(x), float(pi), float(se), tally.units * per_unit, tally.aborts)
            for x, pi, se in zip(x_points, p, stderr)]
    logger.info("cdf estimated", extra=fields(model=config.model.name, t=config.t, n=config.n,
                                               aborts=tally.aborts, points=x_points.size))
    return rows


def estimate_mean_max(config: SimConfig, workers: int = 1,
                      tolerances: Tolerances | None = None) -> tuple[float, float, int]:
    """Sample mean of X_max(t).

    Returns:
        (mean, standard error, effective sample count).
    """
    tol = tolerances or get_settings().tolerances
    tally = _tally(config, np.zeros(0), workers)
    _check_aborts(config, tally.aborts, tol)
    units = max(tally.units, 1)
    mean = tally.max_sum / units
    var = max(tally.max_sq / units - mean**2, 0.0)
    per_unit = 2 if config.antithetic else 1
    return mean, math.sqrt(var / units), tally.units * per_unit
