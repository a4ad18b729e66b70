"""Closed-form and spectral quantities of a branching model.

Everything here is a pure function of an immutable :class:`BranchingModel`:
the cumulant g, the linear spreading velocity V, the critical front
(gamma_c, v_c), the Legendre rate function f, the transition velocity W with
the tail exponent eta, the large-deviation function psi and the prefactors.
"""

import logging
import math
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np
from scipy.optimize import brentq, minimize_scalar
from scipy.special import log_ndtr

from ..utils.config import Tolerances, get_settings
from .errors import FrontError, ModelError
from .model import BranchingModel

logger = logging.getLogger(__name__)

# Keep root brackets strictly inside an open gamma domain.
_DOMAIN_SHRINK = 1.0 - 1e-9


class Regime(str, Enum):
    """Velocity regime of psi(c)."""
    ABOVE = "above-v_c"
    INTERMEDIATE = "intermediate"
    BELOW = "below-W"


@dataclass(frozen=True)
class FrontConstants:
    """Critical and transition scalars of one model."""
    gamma_c: float
    v_c: float
    eta: float
    w: float
    theta: float

    def to_dict(self) -> dict:
        """Convert to dictionary for JSON serialization."""
        return asdict(self)


def _tolerances(tolerances: Tolerances | None) -> Tolerances:
    return tolerances if tolerances is not None else get_settings().tolerances


def _check_domain(model: BranchingModel, gamma: float) -> None:
    lo, hi = model.gamma_domain
    if not (lo < gamma < hi):
        raise ModelError(f"gamma={gamma} outside the exponential-moment domain ({lo}, {hi})")


def spectral_g(model: BranchingModel, gamma: float) -> float:
    """g(gamma) = D gamma^2 + int (e^{gamma y} - 1) rho(y) dy."""
    _check_domain(model, gamma)
    return model.cumulant(gamma)


def velocity_V(model: BranchingModel, gamma: float) -> float:
    """Linear spreading velocity V(gamma) = (beta + g(gamma)) / gamma."""
    if not gamma > 0:
        raise ModelError(f"velocity_V needs gamma > 0, got {gamma}")
    return (model.beta + spectral_g(model, gamma)) / gamma


def _front_slope(model: BranchingModel, gamma: float) -> float:
    """gamma^2 V'(gamma) = gamma g'(gamma) - g(gamma) - beta, increasing for gamma > 0."""
    return gamma * model.cumulant(gamma, 1) - model.cumulant(gamma) - model.beta


def critical_front(model: BranchingModel, tolerances: Tolerances | None = None) -> tuple[float, float]:
    """Locate the minimum of V.

    A bounded golden-section search on V is followed by Newton steps on
    gamma g' - g - beta, whose root is the minimiser.

    Returns:
        (gamma_c, v_c).

    Raises:
        FrontError: V has no interior minimum inside the gamma domain.
    """
    tol = _tolerances(tolerances)
    model.validate()
    hi_domain = model.gamma_domain[1]
    upper = 1.0
    while _front_slope(model, upper) <= 0:
        upper *= 2.0
        if upper >= hi_domain:
            upper = hi_domain * _DOMAIN_SHRINK
            if _front_slope(model, upper) <= 0:
                raise FrontError("V(gamma) has no interior minimum in the gamma domain "
                                 "(jump kernel too heavy-tailed)")
            break
    lower = upper / 2.0
    while _front_slope(model, lower) > 0:
        lower /= 2.0

    result = minimize_scalar(lambda g: velocity_V(model, g), bounds=(lower, upper),
                             method="bounded", options={"xatol": 1e-10})
    gamma = float(result.x)
    for _ in range(20):
        step = _front_slope(model, gamma) / (gamma * model.cumulant(gamma, 2))
        gamma_new = min(max(gamma - step, lower), upper)
        if abs(gamma_new - gamma) <= tol.scalar_rtol * gamma:
            gamma = gamma_new
            break
        gamma = gamma_new
    if abs(_front_slope(model, gamma)) > 1e-9 * max(1.0, model.beta):
        # Newton left the bracket; fall back to a bracketed root.
        gamma = brentq(lambda g: _front_slope(model, g), lower, upper,
                       xtol=tol.root_xtol, rtol=4 * np.finfo(float).eps)
    return gamma, velocity_V(model, gamma)


class RateFunction:
    """Legendre transform f of the cumulant, evaluated through gamma(v).

    ``f(v) = gamma v - g(gamma)`` with ``v = g'(gamma)``; ``f'(v) = gamma`` and
    ``f''(v) = 1 / g''(gamma)``.
    """

    def __init__(self, model: BranchingModel, tolerances: Tolerances | None = None):
        self.model = model
        self.tolerances = _tolerances(tolerances)
        self.gamma_domain = model.gamma_domain
        lo, hi = self.gamma_domain
        y = model.jumps.displacements
        if model.diffusion > 0:
            v_lo, v_hi = -math.inf, math.inf
        else:
            # g' is unbounded towards every side an atom points to, and tends to 0 on the other.
            v_lo = -math.inf if np.any(y < 0) else 0.0
            v_hi = math.inf if np.any(y > 0) else 0.0
        self.v_domain = (v_lo, v_hi)

    @property
    def mean_velocity(self) -> float:
        """Drift v* = g'(0) of the free motion."""
        return self.model.cumulant(0.0, 1)

    def contains(self, v: float) -> bool:
        return self.v_domain[0] < v < self.v_domain[1]

    def gamma_of(self, v: float) -> float:
        """Solve g'(gamma) = v by bracketed monotone root finding."""
        if not self.contains(v):
            raise ModelError(f"velocity {v} outside the attainable range {self.v_domain}")
        model = self.model
        if model.is_local:
            return v / (2.0 * model.diffusion)
        lo, hi = self.gamma_domain
        a, b = -1.0, 1.0
        while model.cumulant(a, 1) > v:
            if a <= lo * _DOMAIN_SHRINK:
                raise ModelError(f"velocity {v} is beyond the representable range of g'")
            a = max(2.0 * a, lo * _DOMAIN_SHRINK)
        while model.cumulant(b, 1) < v:
            if b >= hi * _DOMAIN_SHRINK:
                raise ModelError(f"velocity {v} is beyond the representable range of g'")
            b = min(2.0 * b, hi * _DOMAIN_SHRINK)
        return brentq(lambda g: model.cumulant(g, 1) - v, a, b,
                      xtol=self.tolerances.root_xtol, rtol=4 * np.finfo(float).eps)

    def evaluate(self, v: float) -> tuple[float, float, float]:
        """Return (f(v), f'(v), f''(v))."""
        gamma = self.gamma_of(v)
        f = gamma * v - self.model.cumulant(gamma)
        return f, gamma, 1.0 / self.model.cumulant(gamma, 2)

    def __call__(self, v: float) -> float:
        return self.evaluate(v)[0]

    def derivative(self, v: float) -> float:
        return self.gamma_of(v)

    def curvature(self, v: float) -> float:
        return self.evaluate(v)[2]


def rate_function(model: BranchingModel, tolerances: Tolerances | None = None) -> RateFunction:
    """Build the rate function of the model's free motion."""
    return RateFunction(model, tolerances)


def transition_W(model: BranchingModel, tolerances: Tolerances | None = None) -> tuple[float, float]:
    """Transition velocity W and left-tail exponent eta.

    u* is the smaller root of the concave G(u) = -g(u) + v_c u + alpha,
    bracketed by doubling leftwards from G(0) = alpha > 0.

    Returns:
        (W, eta) with eta = -u* and W = g'(u*).
    """
    tol = _tolerances(tolerances)
    _, v_c = critical_front(model, tol)
    alpha = model.alpha

    def G(u: float) -> float:
        return -model.cumulant(u) + v_c * u + alpha

    lo_domain = model.gamma_domain[0]
    left, right = -1.0, 0.0
    while G(left) > 0:
        right = left
        left *= 2.0
        if left <= lo_domain:
            left = lo_domain * _DOMAIN_SHRINK
            if G(left) > 0:
                raise FrontError("no sign change of G(u) = -g(u) + v_c u + alpha "
                                 "inside the gamma domain")
            break
    u_star = brentq(G, left, right, xtol=tol.root_xtol, rtol=4 * np.finfo(float).eps)
    eta = -u_star
    w = model.cumulant(u_star, 1)

    scale = max(1.0, alpha)
    if abs(G(u_star)) > 1e-8 * scale:
        raise FrontError(f"G(u*) = {G(u_star):.3e} did not vanish")
    f_w = u_star * w - model.cumulant(u_star)
    saddle = alpha + f_w + (v_c - w) * u_star
    if abs(saddle) > 1e-8 * scale:
        raise FrontError(f"saddle condition residual {saddle:.3e} at W={w}")
    if not w < v_c:
        raise FrontError(f"transition velocity W={w} is not below v_c={v_c}")
    return w, eta


def prefactor_exponent(model: BranchingModel, tolerances: Tolerances | None = None) -> float:
    """theta = 3 eta / (2 gamma_c), the power of t in the intermediate regime."""
    return front_constants(model, tolerances).theta


def front_constants(model: BranchingModel, tolerances: Tolerances | None = None) -> FrontConstants:
    """Compute all critical and transition scalars at once."""
    gamma_c, v_c = critical_front(model, tolerances)
    w, eta = transition_W(model, tolerances)
    constants = FrontConstants(gamma_c=gamma_c, v_c=v_c, eta=eta, w=w,
                               theta=3.0 * eta / (2.0 * gamma_c))
    logger.debug("front constants", extra={"fields": {"model": model.name, **constants.to_dict()}})
    return constants


def regime(model: BranchingModel, c: float, constants: FrontConstants | None = None) -> Regime:
    """Classify a velocity; c = v_c belongs to the upper regime, c = W to the lower one."""
    constants = constants or front_constants(model)
    if c >= constants.v_c:
        return Regime.ABOVE
    if c > constants.w:
        return Regime.INTERMEDIATE
    return Regime.BELOW


def psi(model: BranchingModel, c: float, constants: FrontConstants | None = None,
        rate: RateFunction | None = None) -> float:
    """Large-deviation function of X_max(t)/t; +inf for unattainable velocities."""
    constants = constants or front_constants(model)
    rate = rate or rate_function(model)
    if not rate.contains(c):
        return math.inf
    tag = regime(model, c, constants)
    if tag is Regime.ABOVE:
        return max(rate(c) - model.beta, 0.0)
    if tag is Regime.INTERMEDIATE:
        return (constants.v_c - c) * constants.eta
    return model.alpha + rate(c)


def psi_scan(model: BranchingModel, c_grid) -> list[dict]:
    """Rows (c, regime, psi, theta, notes) over a velocity grid."""
    constants = front_constants(model)
    rate = rate_function(model)
    rows = []
    for c in np.asarray(c_grid, dtype=float):
        c = float(c)
        tag = regime(model, c, constants)
        value = psi(model, c, constants, rate)
        notes = ""
        if math.isinf(value):
            theta, notes = None, "unattainable"
        elif tag is Regime.INTERMEDIATE:
            theta = constants.theta
        elif tag is Regime.BELOW:
            theta = -0.5
        else:
            theta, notes = None, "prefactor not computed above v_c"
        rows.append({"c": c, "regime": tag.value, "psi": value, "theta": theta, "notes": notes})
    return rows


def prefactor_amplitude_intermediate(model: BranchingModel, c: float, A: float, B: float,
                                     constants: FrontConstants | None = None) -> float:
    """Amplitude C(c) of u(ct, t) ~ C t^theta e^{-psi t} for W < c < v_c.

    C(c) = ((c - W) / (v_c - W))^theta B e^{-eta A}; it tends to B e^{-eta A}
    as c -> v_c and vanishes as c -> W.
    """
    constants = constants or front_constants(model)
    w, v_c = constants.w, constants.v_c
    if not (w < c < v_c):
        raise ModelError(f"intermediate amplitude needs W < c < v_c, got c={c} "
                         f"with W={w:.6g}, v_c={v_c:.6g}")
    ratio = (c - w) / (v_c - w)
    return ratio ** constants.theta * B * math.exp(-constants.eta * A)


def log_free_cdf(model: BranchingModel, x, t: float, rate: RateFunction | None = None):
    """log of e^{-alpha t} P(X_t < x) for the free motion without branching.

    Exact for pure diffusion; otherwise a saddle-point (Bahadur-Rao) form on
    either side of the mean with a Gaussian form near it.
    """
    if not t > 0:
        raise ModelError(f"log_free_cdf needs t > 0, got {t}")
    x = np.asarray(x, dtype=float)
    decay = -model.alpha * t
    if model.is_local:
        return decay + log_ndtr(x / math.sqrt(2.0 * model.diffusion * t))

    rate = rate or rate_function(model)
    mean = rate.mean_velocity * t
    var0 = model.cumulant(0.0, 2) * t
    out = np.empty_like(x)
    for i, xi in np.ndenumerate(x):
        v = xi / t
        gaussian = log_ndtr((xi - mean) / math.sqrt(var0))
        if not rate.contains(v):
            out[i] = -math.inf if v <= rate.v_domain[0] else 0.0
            continue
        f, gamma, curv = rate.evaluate(v)
        spread = abs(gamma) * math.sqrt(t / curv)
        if spread < 1.0:
            out[i] = gaussian
        elif gamma < 0:
            out[i] = -t * f - math.log(spread * math.sqrt(2.0 * math.pi))
        else:
            out[i] = math.log1p(-math.exp(-t * f) / (spread * math.sqrt(2.0 * math.pi)))
    return decay + (float(out) if out.ndim == 0 else out)
