"""Explicit time steppers and grid-shift helpers shared by the field solvers."""

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import SchemeError

Rhs = Callable[[np.ndarray], np.ndarray]

# Damping of the second-order Runge-Kutta-Chebyshev method.
RKC_DAMPING = 2.0 / 13.0


def ssp_rk2_step(y: np.ndarray, dt: float, rhs: Rhs) -> np.ndarray:
    """Two-stage strong-stability-preserving Runge-Kutta (Heun) step."""
    y1 = y + dt * rhs(y)
    return 0.5 * y + 0.5 * (y1 + dt * rhs(y1))


def rkc_stages(dt: float, spectral_radius: float, max_stages: int = 500) -> int:
    """Stage count keeping dt * spectral_radius inside the RKC2 stability interval."""
    s = 1 + int(math.sqrt(1.0 + 1.54 * dt * spectral_radius))
    s = max(s, 2)
    if s > max_stages:
        raise SchemeError(f"RKC would need {s} stages (dt={dt:g}, spectral radius "
                          f"{spectral_radius:.3g}); reduce dt")
    return s


@dataclass(frozen=True)
class RkcCoefficients:
    """Stage recurrence coefficients of an s-stage RKC2 method."""
    mu_tilde_1: float
    mu: np.ndarray
    nu: np.ndarray
    mu_tilde: np.ndarray
    gamma_tilde: np.ndarray

    @classmethod
    def build(cls, s: int, damping: float = RKC_DAMPING) -> "RkcCoefficients":
        w0 = 1.0 + damping / s**2
        T = np.zeros(s + 1)
        dT = np.zeros(s + 1)
        d2T = np.zeros(s + 1)
        T[0], T[1] = 1.0, w0
        dT[1] = 1.0
        for j in range(2, s + 1):
            T[j] = 2.0 * w0 * T[j - 1] - T[j - 2]
            dT[j] = 2.0 * T[j - 1] + 2.0 * w0 * dT[j - 1] - dT[j - 2]
            d2T[j] = 4.0 * dT[j - 1] + 2.0 * w0 * d2T[j - 1] - d2T[j - 2]
        w1 = dT[s] / d2T[s]

        b = np.zeros(s + 1)
        b[2:] = d2T[2:] / dT[2:] ** 2
        b[0] = b[1] = b[2]
        a = 1.0 - b * T

        mu = np.zeros(s + 1)
        nu = np.zeros(s + 1)
        mu_t = np.zeros(s + 1)
        gam_t = np.zeros(s + 1)
        mu_t[1] = b[1] * w1
        for j in range(2, s + 1):
            mu[j] = 2.0 * b[j] * w0 / b[j - 1]
            nu[j] = -b[j] / b[j - 2]
            mu_t[j] = 2.0 * b[j] * w1 / b[j - 1]
            gam_t[j] = -a[j - 1] * mu_t[j]
        return cls(mu_t[1], mu, nu, mu_t, gam_t)


def rkc2_step(y: np.ndarray, dt: float, rhs: Rhs, stages: int,
              coefficients: RkcCoefficients | None = None) -> np.ndarray:
    """One step of the damped second-order Runge-Kutta-Chebyshev method."""
    k = coefficients or RkcCoefficients.build(stages)
    f0 = rhs(y)
    y_prev2 = y
    y_prev = y + k.mu_tilde_1 * dt * f0
    for j in range(2, stages + 1):
        y_new = ((1.0 - k.mu[j] - k.nu[j]) * y + k.mu[j] * y_prev + k.nu[j] * y_prev2
                 + k.mu_tilde[j] * dt * rhs(y_prev) + k.gamma_tilde[j] * dt * f0)
        y_prev2, y_prev = y_prev, y_new
    return y_prev


def shift_index(displacement: float, dx: float) -> tuple[int, float]:
    """Locate x - y on a grid of spacing dx relative to x.

    Returns:
        (m, frac) such that f(x_j - y) = (1 - frac) f_{j+m} + frac f_{j+m+1}.
    """
    s = -displacement / dx
    m = math.floor(s + 1e-9)
    frac = s - m
    if frac > 1.0 - 1e-9:
        m, frac = m + 1, 0.0
    elif frac < 1e-9:
        frac = 0.0
    return m, frac


def shifted_values(padded: np.ndarray, pad: int, n: int, m: int, frac: float) -> np.ndarray:
    """Linearly interpolated values at x_j - y for j = 0..n-1.

    ``padded`` holds the field with ``pad`` ghost cells on each side.
    """
    start = pad + m
    lower = padded[start:start + n]
    if frac == 0.0:
        return lower
    upper = padded[start + 1:start + 1 + n]
    return (1.0 - frac) * lower + frac * upper
