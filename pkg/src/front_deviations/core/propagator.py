"""Free propagator P(x, t) of the motion without branching."""

import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.integrate import trapezoid

from .errors import InversionError, ModelError
from .model import BranchingModel
from .spectral import rate_function

logger = logging.getLogger(__name__)

# |e^{t g(i theta)}| <= e^{-D t theta^2} < 1e-16 beyond sqrt(37 / (D t)).
_FOURIER_CUTOFF = 37.0


class PropagatorMode(str, Enum):
    """How P(x, t) is evaluated."""
    AUTO = "auto"
    GAUSSIAN = "gaussian"
    FOURIER = "fourier"
    LATTICE = "lattice"
    ASYMPTOTIC = "asymptotic"


@dataclass(frozen=True)
class PropagatorSpec:
    """Model plus evaluation mode."""
    model: BranchingModel
    mode: PropagatorMode = PropagatorMode.AUTO
    theta_points: int = 4096

    def resolved_mode(self) -> PropagatorMode:
        if self.mode is not PropagatorMode.AUTO:
            return self.mode
        model = self.model
        if model.is_local:
            return PropagatorMode.GAUSSIAN
        if model.diffusion > 0:
            return PropagatorMode.FOURIER
        if model.jumps.lattice_step() is not None:
            return PropagatorMode.LATTICE
        raise InversionError("pure-jump kernel off a lattice has no density to invert; "
                             "use the asymptotic mode")


@dataclass(frozen=True)
class PropagatorValue:
    """Density at x (mass per site in lattice mode) and the separate atom at the origin."""
    density: float | np.ndarray
    atom: float
    mode: PropagatorMode


def _gaussian(model: BranchingModel, x: np.ndarray, t: float) -> np.ndarray:
    var = 2.0 * model.diffusion * t
    return np.exp(-x**2 / (2.0 * var)) / math.sqrt(2.0 * math.pi * var)


def _fourier(model: BranchingModel, x: np.ndarray, t: float, points: int) -> np.ndarray:
    if not model.diffusion > 0:
        raise InversionError("Fourier inversion needs diffusion > 0")
    theta_max = math.sqrt(_FOURIER_CUTOFF / (model.diffusion * t))

    def invert(n: int) -> np.ndarray:
        theta = np.linspace(0.0, theta_max, n)
        phase = np.exp(t * model.characteristic_exponent(theta))
        integrand = np.real(np.exp(-1j * np.multiply.outer(x, theta)) * phase)
        return trapezoid(integrand, theta, axis=-1) / math.pi

    fine = invert(points)
    coarse = invert(points // 2)
    bound = float(np.max(np.abs(fine - coarse)))
    if bound > 1e-10 * max(1.0, float(np.max(np.abs(fine)))):
        raise InversionError(f"Fourier inversion unresolved (difference bound {bound:.3e}); "
                             "x is too far out for the theta grid")
    return fine


def lattice_masses(model: BranchingModel, t: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Compound-Poisson masses of a lattice jump process.

    Returns:
        (step, site indices, masses) with the origin atom included.
    """
    step = model.jumps.lattice_step()
    if step is None or model.diffusion > 0:
        raise InversionError("lattice mode needs a pure-jump kernel on a common lattice")
    k = np.rint(model.jumps.displacements / step).astype(int)
    lam_t = model.jump_rate * t
    span = int(np.abs(k).max() * (lam_t + 20.0 * math.sqrt(lam_t + 1.0) + 40.0))
    n = 1 << int(math.ceil(math.log2(2 * span + 1)))
    omega = 2.0 * math.pi * np.arange(n) / n
    char = np.exp(t * (np.exp(-1j * np.multiply.outer(omega, k)) - 1.0) @ model.jumps.rates)
    masses = np.real(np.fft.ifft(char))
    sites = np.arange(n)
    sites[sites > n // 2] -= n
    order = np.argsort(sites)
    return step, sites[order], np.clip(masses[order], 0.0, None)


def _lattice(model: BranchingModel, x: np.ndarray, t: float) -> tuple[np.ndarray, float]:
    step, sites, masses = lattice_masses(model, t)
    atom = math.exp(-model.jump_rate * t)
    ratio = x / step
    nearest = np.rint(ratio).astype(int)
    on_site = np.abs(ratio - nearest) < 1e-9
    values = np.zeros_like(x)
    inside = on_site & (nearest >= sites[0]) & (nearest <= sites[-1])
    values[inside] = masses[nearest[inside] - sites[0]]
    values[inside & (nearest == 0)] -= atom
    return values, atom


def _asymptotic(model: BranchingModel, x: np.ndarray, t: float) -> np.ndarray:
    rate = rate_function(model)
    out = np.zeros_like(x)
    for i, xi in np.ndenumerate(x):
        v = xi / t
        if rate.contains(v):
            f, _, curv = rate.evaluate(v)
            out[i] = math.sqrt(curv / (2.0 * math.pi * t)) * math.exp(-t * f)
    return out


def propagator(spec: PropagatorSpec, x, t: float) -> PropagatorValue:
    """Evaluate P(x, t).

    Pure-jump kernels carry an atom e^{-lambda t} at the origin, returned in
    ``atom`` and excluded from ``density``.
    """
    if not t > 0:
        raise ModelError(f"propagator needs t > 0, got {t}")
    model = spec.model
    points = np.asarray(x, dtype=float)
    arr = np.atleast_1d(points)
    mode = spec.resolved_mode()
    atom = math.exp(-model.jump_rate * t) if model.diffusion == 0 else 0.0
    if mode is PropagatorMode.GAUSSIAN:
        if not model.is_local:
            raise ModelError("the exact Gaussian mode needs a model without jumps")
        values = _gaussian(model, arr, t)
    elif mode is PropagatorMode.FOURIER:
        values = _fourier(model, arr, t, spec.theta_points)
    elif mode is PropagatorMode.LATTICE:
        values, atom = _lattice(model, arr, t)
    else:
        values = _asymptotic(model, arr, t)
    density = float(values[0]) if points.ndim == 0 else values
    return PropagatorValue(density=density, atom=atom, mode=mode)
