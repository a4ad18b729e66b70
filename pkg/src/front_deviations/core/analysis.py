"""Tail fits of log u(ct, t) and assembly of the asymptotic predictions."""

import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from ..utils.config import Tolerances, get_settings
from ..utils.log import fields
from .errors import AnalysisError, FitError
from .model import BranchingModel
from .spectral import FrontConstants, Regime, front_constants, prefactor_amplitude_intermediate, rate_function, regime

logger = logging.getLogger(__name__)

MIN_FIT_POINTS = 10


class FitMode(str, Enum):
    """Free three-parameter fit, or psi fixed to its predicted value."""
    FREE = "free"
    CONSTRAINED = "constrained"


@dataclass
class TailFit:
    """Result of fitting log u = -psi t + theta log t + log C.

    ``covariance`` is always 3x3 in (psi, theta, log C) order; the psi row
    and column are zero in constrained mode.
    """
    psi: float
    theta: float
    log_c: float
    covariance: np.ndarray
    mode: FitMode
    n: int
    t_window: tuple[float, float]
    rms: float

    @property
    def errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def amplitude(self) -> float:
        return math.exp(self.log_c)

    def to_dict(self) -> dict:
        err = self.errors
        return {
            "psi": self.psi, "psi_err": float(err[0]),
            "theta": self.theta, "theta_err": float(err[1]),
            "log_c": self.log_c, "log_c_err": float(err[2]),
            "mode": self.mode.value, "n": self.n,
            "t_window": list(self.t_window), "rms": self.rms,
        }


def _series(series, t_min: float | None = None, t_max: float | None = None):
    """Finite rows with t > 0 inside [t_min, t_max], plus the row mask."""
    data = np.asarray(series, dtype=float).reshape(-1, 2)
    keep = np.isfinite(data).all(axis=1) & (data[:, 0] > 0)
    if t_min is not None:
        keep &= data[:, 0] >= t_min
    if t_max is not None:
        keep &= data[:, 0] <= t_max
    return data[keep, 0], data[keep, 1], keep


def _weighted_lstsq(design: np.ndarray, y: np.ndarray, weights: np.ndarray | None):
    sw = np.sqrt(weights) if weights is not None else np.ones_like(y)
    Xw, yw = design * sw[:, None], y * sw
    coef, *_ = np.linalg.lstsq(Xw, yw, rcond=None)
    resid = yw - Xw @ coef
    dof = max(y.size - design.shape[1], 1)
    s2 = float(resid @ resid) / dof
    cov = s2 * np.linalg.inv(Xw.T @ Xw)
    return coef, cov, float(np.sqrt(np.mean((y - design @ coef) ** 2)))


def fit_tail(series, mode: FitMode | str = FitMode.FREE, psi: float | None = None,
             weights=None, t_min: float | None = None, t_max: float | None = None,
             tolerances: Tolerances | None = None) -> TailFit:
    """Weighted least squares of log u against (-t, log t, 1).

    Args:
        series: Rows (t, log u).
        mode: 'free' fits all three parameters; 'constrained' fixes psi.
        psi: The fixed decay rate (constrained mode only).
        weights: Optional per-point weights, typically 1 / var(log u).
        t_min: Drop points before this time.
        t_max: Drop points after this time.

    Raises:
        FitError: fewer than 10 points, less than a decade in t, or an
            ill-conditioned free fit.
    """
    tol = tolerances or get_settings().tolerances
    mode = FitMode(mode)
    t, y, keep = _series(series, t_min, t_max)
    w = np.asarray(weights, dtype=float).reshape(-1)[keep] if weights is not None else None
    if t.size < MIN_FIT_POINTS:
        raise FitError(f"tail fit needs at least {MIN_FIT_POINTS} points, got {t.size}")
    if t.max() < 10.0 * t.min():
        raise FitError(f"tail fit needs a decade in t, got [{t.min():g}, {t.max():g}]")

    if mode is FitMode.FREE:
        design = np.column_stack((-t, np.log(t), np.ones_like(t)))
        scaled = design / np.linalg.norm(design, axis=0)
        cond = float(np.linalg.cond(scaled))
        if cond > tol.fit_condition:
            raise FitError(f"design condition number {cond:.3e} exceeds {tol.fit_condition:g}; "
                           "use the constrained mode")
        coef, cov, rms = _weighted_lstsq(design, y, w)
        fit = TailFit(psi=float(coef[0]), theta=float(coef[1]), log_c=float(coef[2]),
                      covariance=cov, mode=mode, n=int(t.size),
                      t_window=(float(t.min()), float(t.max())), rms=rms)
    else:
        if psi is None:
            raise FitError("constrained tail fit needs psi")
        design = np.column_stack((np.log(t), np.ones_like(t)))
        coef, cov2, rms = _weighted_lstsq(design, y + psi * t, w)
        cov = np.zeros((3, 3))
        cov[1:, 1:] = cov2
        fit = TailFit(psi=float(psi), theta=float(coef[0]), log_c=float(coef[1]),
                      covariance=cov, mode=mode, n=int(t.size),
                      t_window=(float(t.min()), float(t.max())), rms=rms)
    logger.debug("tail fit", extra=fields(mode=mode.value, psi=fit.psi, theta=fit.theta,
                                          log_c=fit.log_c, n=fit.n))
    return fit


def local_slopes(series, window: int = 5) -> np.ndarray:
    """Sliding slope-only fits of d log u / dt.

    Returns:
        Rows (mean t of the window, -slope), i.e. local decay rates.
    """
    if window < 2:
        raise FitError(f"slope window needs at least 2 points, got {window}")
    t, y, _ = _series(series)
    rows = []
    for i in range(t.size - window + 1):
        tw, yw = t[i:i + window], y[i:i + window]
        slope = np.polyfit(tw, yw, 1)[0]
        rows.append((float(tw.mean()), float(-slope)))
    return np.array(rows, dtype=float).reshape(-1, 2)


def decay_rate(series, theta: float, t_min: float | None = None,
               t_max: float | None = None) -> tuple[float, float]:
    """Decay rate of log u - theta log t by a slope-plus-offset fit.

    Returns:
        (psi, standard error).
    """
    t, y, _ = _series(series, t_min, t_max)
    if t.size < 3:
        raise FitError(f"decay-rate fit needs at least 3 points, got {t.size}")
    design = np.column_stack((-t, np.ones_like(t)))
    coef, cov, _ = _weighted_lstsq(design, y - theta * np.log(t), None)
    return float(coef[0]), float(math.sqrt(max(cov[0, 0], 0.0)))


@dataclass(frozen=True)
class Prediction:
    """Predicted (psi, theta, amplitude) of u(ct, t) ~ C t^theta e^{-psi t}."""
    c: float
    regime: Regime
    psi: float
    theta: float | None
    amplitude: float | None

    def to_dict(self) -> dict:
        return {"c": self.c, "regime": self.regime.value, "psi": self.psi,
                "theta": self.theta, "amplitude": self.amplitude}


def assemble_prediction(model: BranchingModel, c: float, A: float | None = None,
                        B: float | None = None, bracket: float | None = None,
                        constants: FrontConstants | None = None,
                        tolerances: Tolerances | None = None) -> Prediction:
    """Assemble the asymptotic prediction at velocity c.

    Intermediate regime needs the front shift A and tail amplitude B; the
    below-W regime needs the renewal bracket. Above v_c only psi is given.

    Raises:
        AnalysisError: a required constant is missing or c is unattainable.
    """
    constants = constants or front_constants(model, tolerances)
    rate = rate_function(model, tolerances)
    if not rate.contains(c):
        raise AnalysisError(f"velocity c={c} is outside the attainable range")
    tag = regime(model, c, constants)
    if tag is Regime.INTERMEDIATE:
        if A is None or B is None:
            raise AnalysisError(f"intermediate regime at c={c} needs both A and B")
        return Prediction(c, tag, (constants.v_c - c) * constants.eta, constants.theta,
                          prefactor_amplitude_intermediate(model, c, A, B, constants))
    f, _, curvature = rate.evaluate(c)
    if tag is Regime.BELOW:
        if bracket is None:
            raise AnalysisError(f"below-W regime at c={c} needs the renewal bracket")
        return Prediction(c, tag, model.alpha + f, -0.5,
                          bracket * math.sqrt(curvature / (2.0 * math.pi)))
    return Prediction(c, tag, max(f - model.beta, 0.0), None, None)


@dataclass
class DeviationEstimate:
    """Theory against measurement for one velocity and one data source."""
    c: float
    regime: Regime
    source: str
    psi_theory: float | None = None
    psi_fit: float | None = None
    psi_err: float = 0.0
    theta_theory: float | None = None
    theta_fit: float | None = None
    theta_err: float = 0.0
    amp_theory: float | None = None
    amp_fit: float | None = None
    amp_err: float = 0.0
    t_window: tuple[float, float] | None = None
    mode: str = FitMode.CONSTRAINED.value
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if min(self.psi_err, self.theta_err, self.amp_err) < 0:
            raise AnalysisError("fit errors must be nonnegative")

    def check_regime(self, constants: FrontConstants) -> None:
        """Raise if the regime tag disagrees with c against (W, v_c)."""
        if self.c >= constants.v_c:
            expected = Regime.ABOVE
        elif self.c > constants.w:
            expected = Regime.INTERMEDIATE
        else:
            expected = Regime.BELOW
        if self.regime is not expected:
            raise AnalysisError(f"regime tag {self.regime.value} at c={self.c} should be {expected.value}")

    @classmethod
    def theory_only(cls, prediction: Prediction, source: str) -> "DeviationEstimate":
        return cls(c=prediction.c, regime=prediction.regime, source=source,
                   psi_theory=prediction.psi, theta_theory=prediction.theta,
                   amp_theory=prediction.amplitude)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["regime"] = self.regime.value
        data["t_window"] = list(self.t_window) if self.t_window else None
        return data


def estimate_deviation(model: BranchingModel, series, source: str, prediction: Prediction,
                       mode: FitMode | str | None = None, t_min: float | None = None,
                       t_max: float | None = None, tolerances: Tolerances | None = None) -> DeviationEstimate:
    """Fit a ray series (t, log u(ct, t)) and set it against the prediction.

    In constrained mode theta and log C are fitted with psi fixed, and psi is
    checked on its own by a decay-rate fit with theta fixed to its prediction.
    """
    if prediction.regime is Regime.ABOVE:
        raise AnalysisError(f"no tail to fit above v_c (c={prediction.c}): u tends to 1")
    section = get_settings().section("analysis")
    t_min = section["t_min"] if t_min is None else t_min
    t_max = section["t_max"] if t_max is None else t_max
    mode = FitMode(mode or FitMode.CONSTRAINED)
    fit = fit_tail(series, mode, psi=prediction.psi, t_min=t_min, t_max=t_max, tolerances=tolerances)
    err = fit.errors
    if mode is FitMode.CONSTRAINED:
        psi_fit, psi_err = decay_rate(series, prediction.theta, fit.t_window[0], fit.t_window[1])
    else:
        psi_fit, psi_err = fit.psi, float(err[0])
    estimate = DeviationEstimate(
        c=prediction.c, regime=prediction.regime, source=source,
        psi_theory=prediction.psi, psi_fit=psi_fit, psi_err=psi_err,
        theta_theory=prediction.theta, theta_fit=fit.theta, theta_err=float(err[1]),
        amp_theory=prediction.amplitude, amp_fit=fit.amplitude, amp_err=fit.amplitude * float(err[2]),
        t_window=fit.t_window, mode=mode.value, extra={"rms": fit.rms, "n": fit.n},
    )
    logger.info("deviation estimate", extra=fields(c=prediction.c, source=source, psi_fit=psi_fit,
                                                   theta_fit=fit.theta, amp_fit=fit.amplitude))
    return estimate


def scan_slope(estimates) -> tuple[float, float]:
    """Slope of the fitted psi against c across several velocities.

    A straight line is fitted with weights 1/psi_err^2; the error is
    propagated from the psi errors alone.

    Returns:
        (slope, standard error).
    """
    points = [(e.c, e.psi_fit, e.psi_err) for e in estimates
              if e.psi_fit is not None and math.isfinite(e.psi_fit)]
    if len({c for c, _, _ in points}) < 2:
        raise FitError(f"psi slope needs fits at two distinct velocities, got {len(points)}")
    c, y, err = (np.array(column, dtype=float) for column in zip(*points))
    weights = 1.0 / np.maximum(err, 1e-12) ** 2
    design = np.column_stack((c, np.ones_like(c)))
    normal = design.T * weights
    cov = np.linalg.inv(normal @ design)
    coef = cov @ (normal @ y)
    return float(coef[0]), float(math.sqrt(max(cov[0, 0], 0.0)))
