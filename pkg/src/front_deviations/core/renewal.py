"""Renewal (Duhamel) representation of u, stepped in time, and the below-W amplitude.

Conditioning on the first branching event gives

    u(x, t + d) = e^{-alpha d} (K_d * u(., t))(x)
                  + int_0^d ds e^{-alpha s} (K_s * sum_k p_k u(., t + d - s)^k)(x)

with K_s the free propagator.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.integrate import trapezoid
from scipy.ndimage import gaussian_filter1d
from scipy.sparse.linalg import expm_multiply

from ..utils.config import Tolerances, get_settings
from ..utils.log import fields
from .errors import ModelError, RenewalError
from .model import BranchingModel
from .pde import FieldSnapshot, write_snapshots
from .spectral import front_constants, rate_function
from .stepping import shift_index

logger = logging.getLogger(__name__)

_GAUSS = (0.5 * (1.0 - 1.0 / math.sqrt(3.0)), 0.5 * (1.0 + 1.0 / math.sqrt(3.0)))
# 1 - u below this is round-off; u = 1 is unstable under branching, so such cells are reset to 1.
_SATURATED = 1e-10


class FreeSemigroup:
    """Action of K_s on fields sampled on a uniform grid, constant beyond its ends."""

    def __init__(self, model: BranchingModel, x: np.ndarray):
        self.model = model
        self.x = np.asarray(x, dtype=float)
        self.dx = float(self.x[1] - self.x[0])
        self.generator = None if model.is_local else self._build_generator()

    def _build_generator(self) -> sparse.csr_matrix:
        n, dx = self.x.size, self.dx
        rows, cols, vals = [], [], []
        j = np.arange(n)

        def add(index, weight):
            rows.append(j)
            cols.append(np.clip(index, 0, n - 1))
            vals.append(np.full(n, weight))

        D = self.model.diffusion
        if D > 0:
            add(j - 1, D / dx**2)
            add(j, -2.0 * D / dx**2)
            add(j + 1, D / dx**2)
        for y, rate in zip(self.model.jumps.displacements, self.model.jumps.rates):
            m, frac = shift_index(y, dx)
            add(j + m, rate * (1.0 - frac))
            if frac > 0:
                add(j + m + 1, rate * frac)
            add(j, -rate)
        return sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        ).tocsr()

    def apply(self, v: np.ndarray, s: float) -> np.ndarray:
        """(K_s * v) on the grid."""
        if s <= 0:
            return v.copy()
        if self.generator is None:
            sigma = math.sqrt(2.0 * self.model.diffusion * s) / self.dx
            return gaussian_filter1d(v, sigma, mode="nearest", truncate=10.0)
        return expm_multiply(s * self.generator, v)


@dataclass
class RenewalTable:
    """u(x, t) on a uniform (t, x) grid."""
    model: BranchingModel
    x: np.ndarray
    t: np.ndarray
    u: np.ndarray
    corrections: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    def row(self, t: float) -> np.ndarray:
        """u(., t) for a grid time t."""
        k = int(round(t / self.dt))
        if k < 0 or k >= self.t.size or abs(self.t[k] - t) > 1e-9 * max(1.0, t):
            raise ValueError(f"t={t} is not on the table's time grid")
        return self.u[k]

    def u_at(self, x, t: float) -> np.ndarray | float:
        """u at arbitrary x (linear interpolation) and a grid time t."""
        return np.interp(x, self.x, self.row(t), left=0.0, right=1.0)

    def lower_bound(self, x, t: float, tau: float) -> np.ndarray | float:
        """e^{-alpha (t - tau)} (K_{t - tau} * u(., tau))(x): no branching during (tau, t]."""
        if not 0 <= tau <= t:
            raise ValueError(f"need 0 <= tau <= t, got tau={tau}, t={t}")
        semigroup = FreeSemigroup(self.model, self.x)
        moved = semigroup.apply(self.row(tau), t - tau)
        return math.exp(-self.model.alpha * (t - tau)) * np.interp(x, self.x, moved)

    def snapshots(self) -> list[FieldSnapshot]:
        with np.errstate(divide="ignore"):
            logu = np.log(np.maximum(self.u, np.finfo(float).tiny))
        return [FieldSnapshot(float(t), float(self.x[0]), float(self.x[1] - self.x[0]),
                              np.minimum(row, 0.0)) for t, row in zip(self.t, logu)]

    def save(self, path: str | Path) -> None:
        """Write the table in the binary snapshot format, one record per time."""
        write_snapshots(path, self.snapshots())


def renewal_grid(t_max: float, dx: float | None = None, dt: float | None = None,
                 x_min: float | None = None, x_max: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Uniform grids from the ``renewal`` settings, with x = 0 on the grid."""
    section = get_settings().section("renewal")
    dx = float(dx or section["dx"])
    dt = float(dt or section["dt"])
    x_min = float(section["x_min"] if x_min is None else x_min)
    x_max = float(section["x_max"] if x_max is None else x_max)
    x = dx * np.arange(math.floor(x_min / dx), math.ceil(x_max / dx) + 1)
    n_t = int(round(t_max / dt))
    return x, dt * np.arange(n_t + 1)


def _midpoint_values(theta: float, u_prev: np.ndarray | None, u_now: np.ndarray,
                     u_next: np.ndarray) -> np.ndarray:
    """u at t_n + theta dt, quadratic through t_{n-1}, t_n, t_{n+1} when available."""
    if u_prev is None:
        value = (1.0 - theta) * u_now + theta * u_next
    else:
        value = (u_now + 0.5 * theta * (u_next - u_prev)
                 + 0.5 * theta**2 * (u_next - 2.0 * u_now + u_prev))
    return np.clip(value, 0.0, 1.0)


def solve_renewal(model: BranchingModel, x_grid: np.ndarray, t_grid: np.ndarray,
                  tolerances: Tolerances | None = None) -> RenewalTable:
    """Step the renewal identity from step data over a uniform time grid.

    Each step evaluates the branching integral by two-point Gauss quadrature.
    The predictor freezes u (linearly extrapolated after the first step); one
    Picard correction follows.

    Raises:
        RenewalError: the Picard correction exceeds its tolerance.
    """
    tol = tolerances or get_settings().tolerances
    x = np.asarray(x_grid, dtype=float)
    t = np.asarray(t_grid, dtype=float)
    if t.size < 2 or abs(t[0]) > 1e-12:
        raise ModelError("time grid must start at 0 and hold at least two points")
    dt = float(t[1] - t[0])
    if np.any(np.abs(np.diff(t) - dt) > 1e-9 * dt) or np.any(np.abs(np.diff(x) - (x[1] - x[0])) > 1e-9):
        raise ModelError("renewal grids must be uniform")

    semigroup = FreeSemigroup(model, x)
    alpha = model.alpha
    nodes = [dt * g for g in _GAUSS]
    damping = [0.5 * dt * math.exp(-alpha * s) for s in nodes]

    u = np.empty((t.size, x.size))
    u[0] = np.where(x > 0, 1.0, np.where(x < 0, 0.0, 0.5))
    corrections = np.zeros(t.size)

    def advance(u_prev, u_now, guess):
        free = math.exp(-alpha * dt) * semigroup.apply(u_now, dt)
        if alpha == 0:
            return free
        total = free
        for s, weight in zip(nodes, damping):
            mid = _midpoint_values(1.0 - s / dt, u_prev, u_now, guess)
            total = total + weight * semigroup.apply(model.offspring_sum(mid), s)
        return np.clip(total, 0.0, 1.0)

    for n in range(t.size - 1):
        u_prev = u[n - 1] if n > 0 else None
        guess = u[n] if u_prev is None else np.clip(2.0 * u[n] - u_prev, 0.0, 1.0)
        predicted = advance(u_prev, u[n], guess)
        corrected = advance(u_prev, u[n], predicted)
        corrections[n + 1] = float(np.max(np.abs(corrected - predicted)))
        if corrections[n + 1] > tol.picard:
            raise RenewalError(f"Picard correction {corrections[n + 1]:.3e} at t={t[n + 1]:.4g} "
                               f"exceeds {tol.picard:g}; refine dt")
        corrected[corrected > 1.0 - _SATURATED] = 1.0
        u[n + 1] = corrected
        if (n + 1) % 100 == 0:
            logger.debug("renewal step", extra=fields(t=float(t[n + 1]), correction=corrections[n + 1]))
    logger.info("renewal table built", extra=fields(model=model.name, t_max=float(t[-1]), nx=x.size,
                                                     max_correction=float(corrections.max())))
    return RenewalTable(model=model, x=x, t=t, u=u, corrections=corrections)


@dataclass(frozen=True)
class AmplitudeResult:
    """Bracket of the below-W prefactor and the assembled prediction."""
    c: float
    bracket: float
    integral: float
    tail_bound: float
    t_star: float
    psi: float
    theta: float
    amplitude: float

    def to_dict(self) -> dict:
        return {
            "c": self.c,
            "bracket": self.bracket,
            "integral": self.integral,
            "tail_bound": self.tail_bound,
            "t_star": self.t_star,
            "prediction_coefficients": {"psi": self.psi, "theta": self.theta,
                                        "amplitude": self.amplitude},
        }


def _slice_integrals(model: BranchingModel, table: RenewalTable, decay: float, slope: float) -> np.ndarray:
    """J(tau) = int dz e^{tau decay + z slope} sum_k p_k u^k(z, tau), completed with u = 1 on the right."""
    x = table.x
    with np.errstate(divide="ignore"):
        log_branch = np.log(model.offspring_sum(table.u))
    log_weight = decay * table.t[:, None] + slope * x[None, :]
    integrand = np.exp(log_weight + log_branch)
    peak = integrand.max(axis=1)
    edge = integrand[:, 0]
    if np.any(edge > 1e-8 * np.where(peak > 0, peak, 1.0)):
        raise RenewalError("integrand has not decayed at the left end of the table; lower x_min")
    if np.any(table.u[:, -1] < 1.0 - 1e-6):
        raise RenewalError("u has not saturated at the right end of the table; raise x_max")
    right = model.alpha * np.exp(decay * table.t + slope * x[-1]) / (-slope)
    return trapezoid(integrand, x, axis=1) + right


def amplitude_below_W(model: BranchingModel, c: float, table: RenewalTable,
                      t_star: float | None = None, tolerances: Tolerances | None = None) -> AmplitudeResult:
    """Prefactor bracket -1/f'(c) + int_0^inf dtau int dz e^{tau (alpha + f - c f') + z f'} sum p_k u^k.

    The tau integral is truncated at T, doubled from ``t_star`` until the
    last octave contributes below 1%; the remainder is bounded with the
    empirical decay rate of the integrand.

    Raises:
        ModelError: c is not below W.
        RenewalError: the table is too short or the tail bound exceeds its tolerance.
    """
    tol = tolerances or get_settings().tolerances
    constants = front_constants(model, tol)
    if not c < constants.w:
        raise ModelError(f"below-W amplitude needs c < W={constants.w:.6g}, got c={c}")
    f, slope, curvature = rate_function(model, tol).evaluate(c)
    decay = model.alpha + f - c * slope
    J = _slice_integrals(model, table, decay, slope)
    tau = table.t

    T = float(t_star or get_settings().get("renewal", "t_star"))
    while True:
        if T > tau[-1] + 1e-9:
            raise RenewalError(f"renewal table ends at t={tau[-1]:g} before the tau integral "
                               f"converged; extend it beyond {T:g}")
        upto = tau <= T + 1e-9
        total = trapezoid(J[upto], tau[upto])
        octave = upto & (tau >= T / 2 - 1e-9)
        last = trapezoid(J[octave], tau[octave])
        if abs(last) < 0.01 * abs(total) or abs(total) < 1e-12 / abs(slope):
            break
        T *= 2.0

    tail_tau, tail_J = tau[octave], J[octave]
    positive = tail_J > 0
    if positive.sum() < 2:
        tail = 0.0
    else:
        rate_fit = -np.polyfit(tail_tau[positive], np.log(tail_J[positive]), 1)[0]
        if rate_fit <= 0:
            raise RenewalError("tau integrand is not decaying; c is too close to W")
        tail = float(tail_J[-1] / rate_fit)
    if tail > tol.amplitude_tail * max(abs(total), 1e-12):
        raise RenewalError(f"tail bound {tail:.3e} exceeds {tol.amplitude_tail:.0%} of the integral; "
                           "increase t_star")

    bracket = -1.0 / slope + total
    result = AmplitudeResult(c=c, bracket=float(bracket), integral=float(total), tail_bound=tail,
                             t_star=T, psi=model.alpha + f, theta=-0.5,
                             amplitude=float(bracket * math.sqrt(curvature / (2.0 * math.pi))))
    logger.info("below-W amplitude", extra=fields(c=c, bracket=result.bracket, tail=tail, t_star=T))
    return result
