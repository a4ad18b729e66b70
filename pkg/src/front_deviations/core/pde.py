"""Evolution of u(x, t) = P(X_max(t) < x) from step data, in log domain."""

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Callable, Iterable, Iterator

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq

from ..utils.config import Tolerances, get_settings
from ..utils.log import fields
from .errors import FitError, SchemeError, WindowError
from .model import BranchingModel
from .spectral import front_constants, log_free_cdf, rate_function
from .stepping import (RkcCoefficients, rkc2_step, rkc_stages, shift_index,
                       shifted_values, ssp_rk2_step)

logger = logging.getLogger(__name__)

_HEADER = struct.Struct("<dddq")


@dataclass
class FieldSnapshot:
    """log u on the uniform grid x_lo + j dx at time t."""
    t: float
    x_lo: float
    dx: float
    logu: np.ndarray

    @property
    def x(self) -> np.ndarray:
        return self.x_lo + self.dx * np.arange(self.logu.size)

    @property
    def x_hi(self) -> float:
        return self.x_lo + self.dx * (self.logu.size - 1)

    @property
    def u(self) -> np.ndarray:
        return np.exp(self.logu)

    def log_value(self, x: float) -> float:
        """Interpolated log u at x; u is 1 right of the window."""
        if x < self.x_lo:
            raise WindowError(f"x={x:.6g} is left of the window [{self.x_lo:.6g}, {self.x_hi:.6g}] at t={self.t:g}")
        if x > self.x_hi:
            return 0.0
        return float(np.interp(x, self.x, self.logu))

    def write(self, stream: BinaryIO) -> None:
        stream.write(_HEADER.pack(self.t, self.x_lo, self.dx, self.logu.size))
        stream.write(np.asarray(self.logu, dtype="<f8").tobytes())

    @classmethod
    def read(cls, stream: BinaryIO) -> "FieldSnapshot | None":
        head = stream.read(_HEADER.size)
        if not head:
            return None
        if len(head) != _HEADER.size:
            raise ValueError("truncated snapshot header")
        t, x_lo, dx, n = _HEADER.unpack(head)
        data = stream.read(8 * n)
        if len(data) != 8 * n:
            raise ValueError("truncated snapshot data")
        return cls(t, x_lo, dx, np.frombuffer(data, dtype="<f8").astype(float))

    def save(self, path: str | Path) -> None:
        write_snapshots(path, [self])

    @classmethod
    def load(cls, path: str | Path) -> "FieldSnapshot":
        snaps = read_snapshots(path)
        if len(snaps) != 1:
            raise ValueError(f"{path} holds {len(snaps)} snapshots, expected one")
        return snaps[0]


def write_snapshots(path: str | Path, snapshots: Iterable[FieldSnapshot]) -> None:
    """Write snapshots back to back: header (t, x_lo, dx, n) then n little-endian doubles."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        for snap in snapshots:
            snap.write(f)


def read_snapshots(path: str | Path) -> list[FieldSnapshot]:
    snaps = []
    with open(path, "rb") as f:
        while (snap := FieldSnapshot.read(f)) is not None:
            snaps.append(snap)
    return snaps


@dataclass(frozen=True)
class WindowSpec:
    """Moving window [c_min t - margin_left, v_c t + margin_right], grown in chunks."""
    c_min: float = -4.0
    margin_left: float = 20.0
    margin_right: float = 30.0
    chunk: float = 10.0

    @classmethod
    def from_settings(cls) -> "WindowSpec":
        section = get_settings().section("pde")
        return cls(c_min=float(section["c_min"]), margin_left=float(section["margin_left"]),
                   margin_right=float(section["margin_right"]))


class _Field:
    """State of one evolution: values on grid indices j_lo .. j_lo + n - 1."""

    def __init__(self, model: BranchingModel, dx: float, window: WindowSpec, speed: float,
                 initial: Callable[[np.ndarray], np.ndarray] | None):
        self.model = model
        self.dx = dx
        self.window = window
        self.speed = speed
        self.rate = rate_function(model)
        self.t = 0.0
        self.log_domain = False
        self.j_lo = -int(math.ceil(window.margin_left / dx))
        j_hi = int(math.ceil(window.margin_right / dx))
        x = self.x_of(np.arange(self.j_lo, j_hi + 1))
        if initial is None:
            self.values = np.where(x > 0, 1.0, np.where(x < 0, 0.0, 0.5))
        else:
            self.values = np.asarray(initial(x), dtype=float)
        self.shifts = [(shift_index(y, dx), r) for y, r in zip(model.jumps.displacements, model.jumps.rates)]
        self.pad = max((abs(m) + 2 for (m, _), _ in self.shifts), default=0)
        self._coefficients: dict[int, RkcCoefficients] = {}

    def x_of(self, j) -> np.ndarray:
        return np.asarray(j, dtype=float) * self.dx

    @property
    def x(self) -> np.ndarray:
        return self.x_of(np.arange(self.j_lo, self.j_lo + self.values.size))

    def floor(self, x, t: float):
        if t <= 0:
            return np.where(np.asarray(x) < 0, -np.inf, 0.0)
        return log_free_cdf(self.model, x, t, self.rate)

    def ceiling(self, x, t: float):
        """log of the free-motion CDF: u never exceeds it."""
        return np.minimum(np.asarray(self.floor(x, t), dtype=float) + self.model.alpha * t, 0.0)

    def left_value(self, t: float) -> float:
        """Dirichlet value at the left edge."""
        floor = float(self.floor(self.x[0], t))
        return floor if self.log_domain else math.exp(floor)

    # -- window management --------------------------------------------------

    def ensure_window(self, t: float) -> None:
        chunk = int(math.ceil(self.window.chunk / self.dx))
        need_lo = self.window.c_min * t - self.window.margin_left
        while self.x_of(self.j_lo) > need_lo:
            new_j = np.arange(self.j_lo - chunk, self.j_lo)
            x_new = self.x_of(new_j)
            floor = np.asarray(self.floor(x_new, self.t), dtype=float)
            if self.log_domain:
                slope = (self.values[1] - self.values[0]) / self.dx
                fill = self.values[0] - slope * (self.x_of(self.j_lo) - x_new)
                fill = np.clip(fill, floor, self.ceiling(x_new, self.t))
                fill = np.maximum.accumulate(np.minimum(fill, self.values[0]))
            else:
                fill = np.minimum(np.exp(floor), self.values[0])
            self.values = np.concatenate((fill, self.values))
            self.j_lo -= chunk
        need_hi = self.speed * t + self.window.margin_right
        j_hi = self.j_lo + self.values.size - 1
        if self.x_of(j_hi) < need_hi:
            extra = int(math.ceil((need_hi - self.x_of(j_hi)) / self.dx)) + chunk
            fill = np.full(extra, 0.0 if self.log_domain else 1.0)
            self.values = np.concatenate((self.values, fill))

    # -- right-hand sides ---------------------------------------------------

    def _padded(self, v: np.ndarray, right: float) -> np.ndarray:
        if not self.pad:
            return v
        if self.log_domain:
            slope = v[1] - v[0]
            left = v[0] - slope * np.arange(self.pad, 0, -1)
        else:
            left = np.full(self.pad, v[0])
        return np.concatenate((left, v, np.full(self.pad, right)))

    def rhs_linear(self, u: np.ndarray) -> np.ndarray:
        model = self.model
        out = np.zeros_like(u)
        inner = u[1:-1]
        if model.diffusion > 0:
            out[1:-1] = model.diffusion * (u[2:] - 2.0 * inner + u[:-2]) / self.dx**2
        out[1:-1] += model.offspring_sum(inner) - model.alpha * inner
        if self.shifts:
            padded = self._padded(u, 1.0)
            n = u.size
            for (m, frac), rate in self.shifts:
                out += rate * (shifted_values(padded, self.pad, n, m, frac) - u)
            out[0] = out[-1] = 0.0
        return out

    def rhs_log(self, w: np.ndarray) -> np.ndarray:
        model = self.model
        out = np.zeros_like(w)
        inner = w[1:-1]
        if model.diffusion > 0:
            # u_xx / u of the linear stencil, written in w
            out[1:-1] = model.diffusion * (np.exp(w[2:] - inner) + np.exp(w[:-2] - inner) - 2.0) / self.dx**2
        for k, rate in model.offspring:
            out[1:-1] += rate * np.expm1((k - 1) * inner)
        if self.shifts:
            padded = self._padded(w, 0.0)
            n = w.size
            for (m, frac), rate in self.shifts:
                out += rate * np.expm1(shifted_values(padded, self.pad, n, m, frac) - w)
            out[0] = out[-1] = 0.0
        return out

    def spectral_radius(self, w: np.ndarray) -> float:
        model = self.model
        D = model.diffusion
        rho = model.beta
        if D > 0:
            # The Jacobian of the diffusion term is similar to a symmetric matrix; bound by its row sums.
            steps = np.diff(w)
            if steps.size > 1:
                rho += 2.0 * D * float(np.max(np.exp(steps[1:]) + np.exp(-steps[:-1]))) / self.dx**2
            else:
                rho += 4.0 * D / self.dx**2
        if self.shifts:
            padded = self._padded(w, 0.0)
            for (m, frac), rate in self.shifts:
                growth = np.exp(shifted_values(padded, self.pad, w.size, m, frac) - w).max()
                rho += rate * (1.0 + growth)
        return rho

    # -- stepping -----------------------------------------------------------

    def linear_step_bound(self) -> float:
        model = self.model
        return 0.9 / (2.0 * model.diffusion / self.dx**2 + model.jump_rate
                      + model.alpha * model.max_offspring + 1e-300)

    def step_linear(self, dt: float) -> None:
        t_new = self.t + dt
        self.values = ssp_rk2_step(self.values, dt, self.rhs_linear)
        self.values[0] = self.left_value(t_new)
        self.values[-1] = 1.0
        self.t = t_new

    def switch_to_log(self) -> None:
        with np.errstate(divide="ignore", invalid="ignore"):
            logu = np.log(np.maximum(self.values, 0.0))
        x = self.x
        floor = np.asarray(self.floor(x, self.t), dtype=float)
        self.values = np.clip(logu, floor, self.ceiling(x, self.t))
        self.values = np.maximum.accumulate(self.values)
        self.log_domain = True

    def step_log(self, dt: float, tolerance: float, max_stages: int) -> int:
        stages = rkc_stages(dt, self.spectral_radius(self.values), max_stages)
        coefficients = self._coefficients.get(stages)
        if coefficients is None:
            coefficients = self._coefficients[stages] = RkcCoefficients.build(stages)
        t_new = self.t + dt
        w = rkc2_step(self.values, dt, self.rhs_log, stages, coefficients)
        w = np.minimum(w, 0.0)
        w[-1] = 0.0
        # outflow edge: extrapolate from the interior
        w[0] = min(max(2.0 * w[1] - w[2], float(self.floor(self.x[0], t_new))), w[1])
        drops = np.diff(w) < -tolerance * np.maximum(1.0, np.abs(w[1:]))
        if np.any(drops):
            where = float(self.x[1:][drops][0])
            raise SchemeError(f"log u lost monotonicity near x={where:.4g} at t={t_new:.4g}; reduce dt or dx")
        self.values = w
        self.t = t_new
        return stages

    def snapshot(self) -> FieldSnapshot:
        if self.log_domain:
            logu = self.values.copy()
        else:
            with np.errstate(divide="ignore"):
                logu = np.log(np.maximum(self.values, np.finfo(float).tiny))
            logu = np.minimum(logu, 0.0)
        return FieldSnapshot(self.t, float(self.x[0]), self.dx, logu)


def _front_speed(model: BranchingModel) -> float:
    if model.alpha > 0:
        return front_constants(model).v_c
    return rate_function(model).mean_velocity


def evolve(
    model: BranchingModel,
    t_end: float,
    dx: float,
    dt: float,
    window: WindowSpec | None = None,
    output_every: float | None = None,
    stops: Iterable[float] = (),
    t_switch: float | None = None,
    initial: Callable[[np.ndarray], np.ndarray] | None = None,
    tolerances: Tolerances | None = None,
    max_stages: int = 500,
) -> Iterator[FieldSnapshot]:
    """Integrate the evolution equation and stream snapshots.

    Up to ``t_switch`` u is stepped in linear domain with SSP-RK2 under the
    monotone step bound; afterwards w = log u is stepped with RKC2.

    Yields:
        A snapshot at every multiple of ``output_every``, every time in
        ``stops`` and at ``t_end``.
    """
    tol = tolerances or get_settings().tolerances
    settings = get_settings().section("pde")
    window = window or WindowSpec.from_settings()
    output_every = float(output_every or settings["output_every"])
    t_switch = float(settings["t_switch"] if t_switch is None else t_switch)
    if not (dx > 0 and dt > 0 and t_end > 0):
        raise SchemeError(f"need dx, dt, t_end > 0 (got dx={dx}, dt={dt}, t_end={t_end})")
    if not t_switch > 0:
        raise SchemeError("the log-domain phase needs a linear start-up phase (t_switch > 0)")

    field_ = _Field(model, dx, window, _front_speed(model), initial)
    rkc_stages(dt, 4.0 * model.diffusion / dx**2 + model.beta + 2.0 * model.jump_rate, max_stages)

    n_out = int(math.floor(t_end / output_every + 1e-9))
    outputs = {round(k * output_every, 12) for k in range(1, n_out + 1)}
    outputs |= {round(float(s), 12) for s in stops if 0 < s <= t_end}
    outputs.add(round(t_end, 12))
    times = set(outputs)
    if 0 < t_switch < t_end:
        times.add(round(t_switch, 12))

    linear_dt = field_.linear_step_bound()
    for target in sorted(times):
        while field_.t < target - 1e-12:
            remaining = target - field_.t
            if not field_.log_domain and field_.t < t_switch - 1e-12:
                h = min(dt, linear_dt, t_switch - field_.t, remaining)
                field_.ensure_window(field_.t + h)
                field_.step_linear(h)
            else:
                if not field_.log_domain:
                    field_.switch_to_log()
                    logger.debug("switched to log domain", extra=fields(t=field_.t))
                n = int(math.ceil(remaining / dt - 1e-9))
                h = remaining / n
                field_.ensure_window(field_.t + h)
                field_.step_log(h, tol.monotone, max_stages)
        field_.t = target
        if target in outputs:
            snap = field_.snapshot()
            logger.debug("snapshot", extra=fields(t=snap.t, x_lo=snap.x_lo, n=snap.logu.size))
            yield snap


def front_position(snapshot: FieldSnapshot, level: float = 0.5) -> float:
    """x where u crosses ``level``, by monotone cubic interpolation of log u."""
    if not 0 < level < 1:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    target = math.log(level)
    w, x = snapshot.logu, snapshot.x
    idx = int(np.searchsorted(w, target))
    if idx == 0 or idx >= w.size:
        raise WindowError(f"level {level} is not bracketed by the window at t={snapshot.t:g}")
    lo, hi = max(idx - 4, 0), min(idx + 4, w.size)
    curve = PchipInterpolator(x[lo:hi], w[lo:hi])
    return float(brentq(lambda s: float(curve(s)) - target, x[idx - 1], x[idx]))


def tail_sample(snapshots: Iterable[FieldSnapshot], c: float) -> np.ndarray:
    """Rows (t, log u(ct, t)) along the ray x = ct."""
    rows = [(snap.t, snap.log_value(c * snap.t)) for snap in snapshots]
    return np.array(rows, dtype=float).reshape(-1, 2)


@dataclass(frozen=True)
class FrontFit:
    """Least-squares fit of the front position."""
    A: float
    uncertainty: float
    subleading: float
    rms: float
    n: int
    kappa: float
    kappa_uncertainty: float = 0.0

    def to_dict(self) -> dict:
        return {"A": self.A, "uncertainty": self.uncertainty, "subleading": self.subleading,
                "rms": self.rms, "n": self.n, "kappa": self.kappa,
                "kappa_uncertainty": self.kappa_uncertainty}


def _trace_window(trace, t_min: float | None) -> tuple[np.ndarray, np.ndarray]:
    data = np.asarray(trace, dtype=float).reshape(-1, 2)
    t_min = float(get_settings().get("pde", "transient") if t_min is None else t_min)
    keep = data[:, 0] >= t_min
    t, x = data[keep, 0], data[keep, 1]
    if t.size < 4 or t.max() < 10.0 * t.min():
        raise FitError(f"front trace past t={t_min:g} must span a decade with >= 4 points")
    return t, x


def _lstsq(design: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    dof = max(y.size - design.shape[1], 1)
    s2 = float(resid @ resid) / dof
    cov = s2 * np.linalg.inv(design.T @ design)
    return coef, cov, float(np.sqrt(np.mean(resid**2)))


def extract_A(trace, model: BranchingModel, t_min: float | None = None,
              tolerances: Tolerances | None = None) -> FrontFit:
    """Fit x(t) = v_c t - (3 / (2 gamma_c)) ln t + A + a / sqrt(t).

    Raises:
        FitError: the rms residual exceeds the front-fit tolerance.
    """
    tol = tolerances or get_settings().tolerances
    constants = front_constants(model, tol)
    t, x = _trace_window(trace, t_min)
    kappa = 3.0 / (2.0 * constants.gamma_c)
    y = x - constants.v_c * t + kappa * np.log(t)
    design = np.column_stack((np.ones_like(t), 1.0 / np.sqrt(t)))
    coef, cov, rms = _lstsq(design, y)
    if rms > tol.front_fit_rms:
        raise FitError(f"front fit residual {rms:.3e} exceeds {tol.front_fit_rms:g}")
    fit = FrontFit(A=float(coef[0]), uncertainty=float(np.sqrt(cov[0, 0])),
                   subleading=float(coef[1]), rms=rms, n=int(t.size), kappa=kappa)
    logger.info("front shift", extra=fields(A=fit.A, uncertainty=fit.uncertainty, rms=rms))
    return fit


def fit_log_coefficient(trace, model: BranchingModel, t_min: float | None = None,
                        tolerances: Tolerances | None = None) -> FrontFit:
    """Fit x(t) - v_c t = -kappa ln t + A + a / sqrt(t) with kappa free."""
    tol = tolerances or get_settings().tolerances
    constants = front_constants(model, tol)
    t, x = _trace_window(trace, t_min)
    y = x - constants.v_c * t
    design = np.column_stack((-np.log(t), np.ones_like(t), 1.0 / np.sqrt(t)))
    coef, cov, rms = _lstsq(design, y)
    if rms > tol.front_fit_rms:
        raise FitError(f"front fit residual {rms:.3e} exceeds {tol.front_fit_rms:g}")
    return FrontFit(A=float(coef[1]), uncertainty=float(np.sqrt(cov[1, 1])),
                    subleading=float(coef[2]), rms=rms, n=int(t.size),
                    kappa=float(coef[0]), kappa_uncertainty=float(np.sqrt(cov[0, 0])))


@dataclass
class EvolutionResult:
    """Everything collected from one evolution run."""
    trace: np.ndarray
    rays: dict[float, np.ndarray]
    dumps: list[FieldSnapshot] = field(default_factory=list)
    snapshots: list[FieldSnapshot] = field(default_factory=list)
    level_traces: dict[float, np.ndarray] = field(default_factory=dict)


def run_evolution(
    model: BranchingModel,
    t_end: float,
    dx: float,
    dt: float,
    rays: Iterable[float] = (),
    dump_times: Iterable[float] = (),
    level: float = 0.5,
    extra_levels: Iterable[float] = (),
    window: WindowSpec | None = None,
    output_every: float | None = None,
    keep_snapshots: bool = False,
    tolerances: Tolerances | None = None,
) -> EvolutionResult:
    """Drive :func:`evolve`, collecting the front trace, ray series and dumps.

    ``extra_levels`` adds traces of x_q(t), where u(x_q, t) = q, for each q.
    """
    rays = [float(c) for c in rays]
    extra_levels = [float(q) for q in extra_levels]
    others = {q: [] for q in extra_levels}
    dump_times = sorted(float(s) for s in dump_times)
    trace, series = [], {c: [] for c in rays}
    result = EvolutionResult(trace=np.zeros((0, 2)), rays={})
    for snap in evolve(model, t_end, dx, dt, window, output_every, stops=dump_times,
                       tolerances=tolerances):
        trace.append((snap.t, front_position(snap, level)))
        for q in extra_levels:
            others[q].append((snap.t, front_position(snap, q)))
        for c in rays:
            series[c].append((snap.t, snap.log_value(c * snap.t)))
        if any(abs(snap.t - s) < 1e-9 for s in dump_times):
            result.dumps.append(snap)
        if keep_snapshots:
            result.snapshots.append(snap)
        logger.debug("front", extra=fields(t=snap.t, x_half=trace[-1][1]))
    result.trace = np.array(trace, dtype=float).reshape(-1, 2)
    result.rays = {c: np.array(rows, dtype=float).reshape(-1, 2) for c, rows in series.items()}
    result.level_traces = {q: np.array(rows, dtype=float).reshape(-1, 2) for q, rows in others.items()}
    logger.info("evolution finished", extra=fields(model=model.name, t_end=t_end, outputs=len(trace)))
    return result
