"""Travelling-wave profile F(z) of the front and its left-tail constants."""

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import sparse
from scipy.integrate import solve_ivp, trapezoid
from scipy.optimize import brentq
from scipy.sparse.linalg import spsolve

from ..utils.config import Tolerances, get_settings
from ..utils.log import fields
from .errors import WaveError
from .model import BranchingModel
from .spectral import FrontConstants, front_constants
from .stepping import shift_index

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class WaveGrid:
    """Uniform z grid; unset ends default to -25/eta and 25/gamma_c + 5."""
    h: float = 0.02
    z_min: float | None = None
    z_max: float | None = None

    def resolve(self, constants: FrontConstants) -> tuple[np.ndarray, int]:
        """Return the grid and the index of z = 0."""
        if not self.h > 0:
            raise WaveError(f"grid spacing must be positive, got {self.h}")
        z_min = self.z_min if self.z_min is not None else -25.0 / constants.eta
        z_max = self.z_max if self.z_max is not None else 25.0 / constants.gamma_c + 5.0
        if not z_min < 0 < z_max:
            raise WaveError(f"grid [{z_min}, {z_max}] must contain z = 0")
        n_left = int(math.ceil(-z_min / self.h))
        n_right = int(math.ceil(z_max / self.h))
        return self.h * np.arange(-n_left, n_right + 1), n_left

    @classmethod
    def from_settings(cls) -> "WaveGrid":
        section = get_settings().section("wave")
        return cls(h=float(section["h"]), z_min=section["z_min"], z_max=section["z_max"])


@dataclass
class WaveProfile:
    """Discretised travelling wave anchored at F(0) = q."""
    z: np.ndarray
    values: np.ndarray
    q: float
    B: float
    eta: float
    eta_fit: float
    residual: float
    fit_window: tuple[float, float]
    constants: FrontConstants
    identity_residual: float | None = None
    source: str = "relaxation"
    extra: dict = field(default_factory=dict)

    @property
    def h(self) -> float:
        return float(self.z[1] - self.z[0])

    def anchor_shift(self, level: float) -> float:
        """Position z where F(z) = level."""
        F = self.values
        if not (F[0] < level < F[-1]):
            raise WaveError(f"level {level} not bracketed by the profile")
        hi = int(np.searchsorted(F, level))
        return brentq(lambda s: np.interp(s, self.z, F) - level,
                      self.z[max(hi - 1, 0)], self.z[hi])

    def at(self, z) -> np.ndarray:
        """F at arbitrary points, continued by B e^{eta z} on the left and 1 on the right."""
        z = np.asarray(z, dtype=float)
        inside = np.interp(z, self.z, self.values)
        left = self.B * np.exp(self.eta * np.minimum(z, self.z[0]))
        return np.where(z < self.z[0], left, np.where(z > self.z[-1], 1.0, inside))

    def to_dict(self) -> dict:
        """JSON summary of the profile constants."""
        return {
            "B": self.B,
            "eta": self.eta,
            "eta_fit": self.eta_fit,
            "residual": self.residual,
            "identity_residual": self.identity_residual,
            "anchor": self.q,
            "h": self.h,
            "z_min": float(self.z[0]),
            "z_max": float(self.z[-1]),
            "fit_window": list(self.fit_window),
            "source": self.source,
            **self.extra,
        }

    def write_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["z", "F"])
            for z, v in zip(self.z, self.values):
                writer.writerow([f"{z:.10g}", f"{v:.17g}"])

    def write_summary(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)


class _FrontOperator:
    """Discrete front equation D F'' + v_c F' + J[F] + sum p_k (F^k - F) = 0.

    The linear part is an affine sparse map ``M F + m`` over the equation rows.
    Points left of the grid follow F_0 e^{eta (z - z_0)}; points right of it
    follow 1 - (1 - F_N) e^{-gamma_c (z - z_N)}.
    """

    def __init__(self, model: BranchingModel, constants: FrontConstants, z: np.ndarray, anchor: int):
        self.model = model
        self.constants = constants
        self.n = z.size
        self.h = float(z[1] - z[0])
        self.anchor = anchor
        last = self.n - 1
        # Second-order problems drop the last node; first-order ones the first.
        self.nodes = np.arange(0, last) if model.diffusion > 0 else np.arange(1, last + 1)
        self.n_eq = self.nodes.size
        self._rows: list[np.ndarray] = []
        self._cols: list[np.ndarray] = []
        self._vals: list[np.ndarray] = []
        self.offset = np.zeros(self.n_eq)
        self._assemble()
        self.matrix = sparse.coo_matrix(
            (np.concatenate(self._vals), (np.concatenate(self._rows), np.concatenate(self._cols))),
            shape=(self.n_eq, self.n),
        ).tocsr()
        self._node_selector = sparse.coo_matrix(
            (np.ones(self.n_eq), (np.arange(self.n_eq), self.nodes)), shape=(self.n_eq, self.n)
        ).tocsr()

    def _add(self, index: np.ndarray, weight: float | np.ndarray) -> None:
        last = self.n - 1
        index = np.asarray(index)
        weight = np.broadcast_to(np.asarray(weight, dtype=float), index.shape)
        col = np.clip(index, 0, last)
        coeff = np.ones(index.shape)
        const = np.zeros(index.shape)
        left = index < 0
        coeff[left] = np.exp(self.constants.eta * index[left] * self.h)
        right = index > last
        decay = np.exp(-self.constants.gamma_c * (index[right] - last) * self.h)
        coeff[right] = decay
        const[right] = 1.0 - decay
        rows = np.arange(self.n_eq)
        self._rows.append(rows)
        self._cols.append(col)
        self._vals.append(weight * coeff)
        self.offset += weight * const

    def _assemble(self) -> None:
        D = self.model.diffusion
        v_c = self.constants.v_c
        h = self.h
        j = self.nodes
        if D > 0:
            self._add(j - 1, D / h**2 - v_c / (2 * h))
            self._add(j, -2.0 * D / h**2)
            self._add(j + 1, D / h**2 + v_c / (2 * h))
        else:
            self._add(j, 1.5 * v_c / h)
            self._add(j - 1, -2.0 * v_c / h)
            self._add(j - 2, 0.5 * v_c / h)
        jumps = self.model.jumps
        for y, rate in zip(jumps.displacements, jumps.rates):
            m, frac = shift_index(y, h)
            self._add(j + m, rate * (1.0 - frac))
            if frac > 0:
                self._add(j + m + 1, rate * frac)
        if jumps.total_rate > 0:
            self._add(j, -jumps.total_rate)

    def reaction(self, F: np.ndarray) -> np.ndarray:
        return self.model.offspring_sum(F) - self.model.alpha * F

    def equations(self, F: np.ndarray) -> np.ndarray:
        return self.matrix @ F + self.offset + self.reaction(F[self.nodes])

    def residual(self, F: np.ndarray, q: float) -> np.ndarray:
        return np.append(self.equations(F), F[self.anchor] - q)

    def jacobian(self, F: np.ndarray) -> sparse.csr_matrix:
        slope = self.model.offspring_sum_derivative(F[self.nodes]) - self.model.alpha
        top = self.matrix + sparse.diags(slope) @ self._node_selector
        anchor_row = sparse.coo_matrix(([1.0], ([0], [self.anchor])), shape=(1, self.n))
        return sparse.vstack([top, anchor_row]).tocsc()

    def pseudo_time(self) -> sparse.csc_matrix:
        return sparse.vstack([self._node_selector, sparse.csr_matrix((1, self.n))]).tocsc()


def _shooting_guess(model: BranchingModel, constants: FrontConstants, z: np.ndarray, q: float) -> np.ndarray:
    """Integrate the local front ODE along the unstable manifold of F = 0."""
    D, v_c, eta = model.diffusion, constants.v_c, constants.eta
    alpha = model.alpha

    def rhs(_, y):
        F, dF = y
        return [dF, -(v_c * dF + model.offspring_sum(F) - alpha * F) / D]

    def reach_level(_, y):
        return y[0] - q

    def saturate(_, y):
        return y[0] - (1.0 - 1e-13)

    saturate.terminal = True
    start = 1e-10
    span = 50.0 / eta + 60.0 / constants.gamma_c + 50.0
    sol = solve_ivp(rhs, (0.0, span), [start, eta * start], method="DOP853",
                    rtol=1e-11, atol=1e-15, dense_output=True, events=[reach_level, saturate])
    if not sol.t_events[0].size:
        raise WaveError("shooting never reached the anchor level")
    z_q = float(sol.t_events[0][0])
    s = z + z_q
    end = sol.t[-1]
    inside = (s >= 0) & (s <= end)
    F = np.ones_like(z)
    F[s < 0] = start * np.exp(eta * s[s < 0])
    F[inside] = sol.sol(s[inside])[0]
    return np.clip(np.maximum.accumulate(F), 0.0, 1.0)


def _logistic_guess(constants: FrontConstants, z: np.ndarray, q: float) -> np.ndarray:
    return 1.0 / (1.0 + (1.0 / q - 1.0) * np.exp(-constants.eta * z))


def _relax(op: _FrontOperator, F: np.ndarray, q: float, tol: float,
           sigma: float, max_iter: int = 400) -> tuple[np.ndarray, float, int]:
    """Damped Newton with pseudo-transient continuation."""
    R = op.residual(F, q)
    r = float(np.max(np.abs(R)))
    identity = op.pseudo_time()
    for iteration in range(1, max_iter + 1):
        if r < tol:
            return F, r, iteration - 1
        delta = spsolve(sigma * identity - op.jacobian(F), R)
        trial = F + delta
        R_trial = op.residual(trial, q)
        r_trial = float(np.max(np.abs(R_trial)))
        if not np.isfinite(r_trial) or r_trial > r:
            sigma = max(10.0 * sigma, 1.0)
            logger.debug("relaxation step rejected", extra=fields(iteration=iteration, sigma=sigma))
            continue
        sigma = 0.0 if r_trial < 1e-6 else sigma * r_trial / r
        F, R, r = trial, R_trial, r_trial
        logger.debug("relaxation", extra=fields(iteration=iteration, residual=r, sigma=sigma))
    if r < tol:
        return F, r, max_iter
    raise WaveError(f"front relaxation did not converge: residual {r:.3e} after {max_iter} iterations")


def fit_left_tail(z: np.ndarray, F: np.ndarray, eta: float, slope_window: float,
                  min_points: int = 50) -> tuple[float, float, tuple[float, float]]:
    """Fit F ~ B e^{eta z} on the longest stretch where the log-slope is within tolerance.

    Returns:
        (B, eta_fit, (z_lo, z_hi)).
    """
    positive = (F > 0) & (z < 0)
    zz, logF = z[positive], np.log(F[positive])
    if zz.size < min_points:
        raise WaveError("no positive left tail to fit")
    slopes = np.diff(logF) / np.diff(zz)
    good = np.abs(slopes - eta) <= slope_window * eta
    edges = np.diff(np.concatenate(([0], good.astype(np.int8), [0])))
    starts, stops = np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)
    if not starts.size:
        raise WaveError("fit window not found: left log-slope never settles at eta (grid too short)")
    best = int(np.argmax(stops - starts))
    lo, hi = starts[best], stops[best] + 1
    if hi - lo < min_points:
        raise WaveError(f"fit window of {hi - lo} points is too short (grid too short on the left)")
    zw, lw = zz[lo:hi], logF[lo:hi]
    B = float(np.exp(np.mean(lw - eta * zw)))
    eta_fit = float(np.polyfit(zw, lw, 1)[0])
    return B, eta_fit, (float(zw[0]), float(zw[-1]))


def solve_wave(
    model: BranchingModel,
    grid: WaveGrid | None = None,
    anchor: float = 0.5,
    tolerances: Tolerances | None = None,
    constants: FrontConstants | None = None,
) -> WaveProfile:
    """Relax the discrete front equation to a monotone profile with F(0) = anchor.

    Local models start from a shooting solution; models with jumps from a
    logistic profile. Both are polished by Newton iteration on the same
    sparse discretisation.
    """
    tol = tolerances or get_settings().tolerances
    grid = grid or WaveGrid.from_settings()
    if not 0 < anchor < 1:
        raise WaveError(f"anchor level must lie in (0, 1), got {anchor}")
    constants = constants or front_constants(model, tol)
    z, j0 = grid.resolve(constants)
    op = _FrontOperator(model, constants, z, j0)

    if model.diffusion > 0 and model.is_local:
        guess, sigma = _shooting_guess(model, constants, z, anchor), 0.0
    else:
        guess, sigma = _logistic_guess(constants, z, anchor), 1.0
    F, residual, iterations = _relax(op, guess, anchor, tol.wave_residual, sigma)

    if np.any(F <= 0) or np.any(F > 1.0 + 1e-10) or np.any(np.diff(F) < -1e-10):
        raise WaveError("relaxed profile is not a monotone function in (0, 1]")
    F = np.minimum(F, 1.0)
    if F[-1] < 1.0 - 1e-8:
        raise WaveError(f"profile has not saturated at z_max: 1 - F = {1 - F[-1]:.3e}")

    B, eta_fit, window = fit_left_tail(z, F, constants.eta, tol.wave_slope_window)
    if abs(eta_fit - constants.eta) > 1e-3 * constants.eta:
        raise WaveError(f"fitted left exponent {eta_fit:.6g} differs from eta={constants.eta:.6g}")
    profile = WaveProfile(z=z, values=F, q=anchor, B=B, eta=constants.eta, eta_fit=eta_fit,
                          residual=residual, fit_window=window, constants=constants)
    logger.info("wave profile relaxed", extra=fields(model=model.name, B=B, eta_fit=eta_fit,
                                                      residual=residual, iterations=iterations))
    return profile


def solve_wave_local(model: BranchingModel, grid: WaveGrid | None = None, anchor: float = 0.5,
                     tolerances: Tolerances | None = None) -> WaveProfile:
    """Front profile of a model with a second-order (diffusive) term."""
    if not model.diffusion > 0:
        raise WaveError("solve_wave_local needs diffusion > 0; use solve_wave for pure jump models")
    return solve_wave(model, grid, anchor, tolerances)


def left_identity_terms(profile: WaveProfile, model: BranchingModel) -> tuple[float, float, float]:
    """Integral of sum p_k F^k e^{-eta z} split into (grid part, left tail, right tail)."""
    z, F, eta, B = profile.z, profile.values, profile.eta, profile.B
    body = trapezoid(model.offspring_sum(F) * np.exp(-eta * z), z)
    left = sum(rate * B**k * math.exp((k - 1) * eta * z[0]) / ((k - 1) * eta)
               for k, rate in model.offspring)
    right = model.alpha * math.exp(-eta * z[-1]) / eta
    return float(body), float(left), float(right)


def verify_left_identity(profile: WaveProfile, model: BranchingModel,
                         tolerances: Tolerances | None = None) -> float:
    """Relative residual of  int sum p_k F^k e^{-eta z} dz = (v_c - W) B.

    Raises:
        WaveError: the analytic tail completions carry more than the allowed
            fraction of the integral.
    """
    tol = tolerances or get_settings().tolerances
    body, left, right = left_identity_terms(profile, model)
    total = body + left + right
    if (left + right) > tol.tail_fraction * total:
        raise WaveError(f"tails carry {(left + right) / total:.1%} of the identity integral; "
                        "extend the grid")
    target = (profile.constants.v_c - profile.constants.w) * profile.B
    residual = abs(total - target) / target
    profile.identity_residual = residual
    logger.info("left identity", extra=fields(integral=total, target=target, residual=residual))
    return residual


def harvest_profile(snapshots: Iterable, model: BranchingModel, level: float = 0.5,
                    grid: WaveGrid | None = None, tolerances: Tolerances | None = None) -> WaveProfile:
    """Average late-time PDE fields recentred at their level crossing.

    The left-tail fit is attempted on a looser slope window; when it fails
    B and eta_fit are reported as NaN.
    """
    from .pde import front_position

    tol = tolerances or get_settings().tolerances
    constants = front_constants(model, tol)
    grid = grid or WaveGrid(h=0.05, z_min=-40.0, z_max=25.0 / constants.gamma_c + 5.0)
    z, _ = grid.resolve(constants)
    stack = []
    for snap in snapshots:
        x_level = front_position(snap, level)
        stack.append(np.interp(z, snap.x - x_level, snap.u, left=0.0, right=1.0))
    if not stack:
        raise WaveError("no snapshots to harvest")
    F = np.maximum.accumulate(np.mean(stack, axis=0))
    try:
        B, eta_fit, window = fit_left_tail(z, F, constants.eta, 10 * tol.wave_slope_window, min_points=20)
    except WaveError as e:
        logger.warning("harvested profile has no clean left tail", extra=fields(reason=str(e)))
        B, eta_fit, window = math.nan, math.nan, (math.nan, math.nan)
    return WaveProfile(z=z, values=F, q=level, B=B, eta=constants.eta, eta_fit=eta_fit,
                       residual=math.nan, fit_window=window, constants=constants,
                       source="pde-harvest", extra={"snapshots": len(stack)})
