"""End-to-end validation run: rates, wave, evolve, renewal, mc, analyze."""

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from ..utils.config import RunConfig, get_settings
from ..utils.log import fields
from .analysis import DeviationEstimate, assemble_prediction, estimate_deviation, scan_slope
from .model import BranchingModel
from .montecarlo import SimConfig, estimate_cdf
from .pde import EvolutionResult, extract_A, fit_log_coefficient, run_evolution
from .renewal import RenewalTable, amplitude_below_W, renewal_grid, solve_renewal
from .report import ComparisonRow, ReportSummary, report, tolerance_row, write_series, write_table
from .spectral import FrontConstants, Regime, front_constants, prefactor_amplitude_intermediate, psi, psi_scan, rate_function, regime
from .wave import WaveGrid, WaveProfile, solve_wave, verify_left_identity

logger = logging.getLogger(__name__)

DEFAULT_PARAMS: dict[str, Any] = {
    "t_end": 100.0,
    "dx": 0.05,
    "dt": 0.05,
    "c": [-3.0, 0.0, 0.5, 1.0, 3.0],
    "levels": [0.3, 0.7],
    "oracle_t": 5.0,
    "oracle_x": [-2.0, 0.0, 2.0, 5.0],
    "renewal_t": 16.0,
    "mc_n": 1_000_000,
    "xlsx": False,
}


def mary_closed_forms(m: int) -> dict[str, float]:
    """Front constants of binary-to-m-ary branching Brownian motion with D = 1, rate 1."""
    eta = math.sqrt(m) - math.sqrt(m - 1)
    return {
        "gamma_c": math.sqrt(m - 1),
        "v_c": 2.0 * math.sqrt(m - 1),
        "eta": eta,
        "w": -2.0 * eta,
        "theta": 1.5 * (math.sqrt(m / (m - 1)) - 1.0),
    }


def mary_psi(m: int, c: float) -> float:
    """Closed-form large-deviation function of the same family."""
    forms = mary_closed_forms(m)
    if c >= forms["v_c"]:
        return c * c / 4.0 - (m - 1)
    if c > forms["w"]:
        return (forms["v_c"] - c) * forms["eta"]
    return 1.0 + c * c / 4.0


def _mary_order(model: BranchingModel) -> int | None:
    if model.is_local and model.diffusion == 1.0 and len(model.offspring) == 1:
        k, rate = model.offspring[0]
        if rate == 1.0:
            return k
    return None


@dataclass
class PipelineState:
    """Results handed from one stage to the next."""
    model: BranchingModel
    params: dict[str, Any]
    out_dir: Path
    workers: int
    seed: int
    constants: FrontConstants | None = None
    profiles: dict[float, WaveProfile] = field(default_factory=dict)
    evolution: EvolutionResult | None = None
    A: dict[float, float] = field(default_factory=dict)
    table: RenewalTable | None = None
    brackets: dict[float, float] = field(default_factory=dict)
    oracle: dict[str, list[float]] = field(default_factory=dict)
    rows: list[ComparisonRow | DeviationEstimate] = field(default_factory=list)

    @property
    def threshold(self) -> float:
        return get_settings().tolerances.zscore

    def check(self, check: str, quantity: str, theory, measured, tolerance: float,
              relative: bool = False, **extra) -> None:
        self.rows.append(tolerance_row(check, quantity, theory, measured, tolerance, relative,
                                       self.threshold, **extra))


def stage_rates(state: PipelineState) -> None:
    model = state.model
    tol = get_settings().tolerances
    state.constants = constants = front_constants(model, tol)
    rate = rate_function(model, tol)
    c_grid = np.round(np.arange(-4.0, constants.v_c + 2.0, 0.05), 10)
    write_table(state.out_dir / "rates.csv", psi_scan(model, c_grid),
                ["c", "regime", "psi", "theta", "notes"])
    with open(state.out_dir / "constants.json", "w", encoding="utf-8") as f:
        json.dump({"model": model.to_dict(), **constants.to_dict()}, f, indent=2)

    state.check("constants", "eta+f'(W)", 0.0, constants.eta + rate.derivative(constants.w), 1e-10)
    m = _mary_order(model)
    if m is not None:
        for key, value in mary_closed_forms(m).items():
            state.check("constants", key, value, getattr(constants, key), 1e-10)
        for c in (0.0, -2.0, 3.0):
            state.check("psi", "psi", mary_psi(m, c), psi(model, c, constants, rate), 1e-10, c=c,
                        regime=regime(model, c, constants).value)


def stage_wave(state: PipelineState) -> None:
    tol = get_settings().tolerances
    grid = WaveGrid.from_settings()
    for q in [0.5, *state.params["levels"]]:
        profile = solve_wave(state.model, grid, q, tol, state.constants)
        state.profiles[float(q)] = profile
    reference = state.profiles[0.5]
    residual = verify_left_identity(reference, state.model, tol)
    state.check("wave", "identity_residual", 0.0, residual, tol.identity, source="wave")
    reference.write_csv(state.out_dir / "wave.csv")
    reference.write_summary(state.out_dir / "wave.json")


def stage_evolve(state: PipelineState) -> None:
    params = state.params
    tol = get_settings().tolerances
    rays = [c for c in params["c"] if regime(state.model, c, state.constants) is not Regime.ABOVE]
    result = run_evolution(state.model, params["t_end"], params["dx"], params["dt"], rays=rays,
                           dump_times=[params["oracle_t"]], extra_levels=params["levels"],
                           tolerances=tol)
    state.evolution = result
    write_series(state.out_dir / "trace.csv", result.trace, ("t", "x_half"))
    for c, series in result.rays.items():
        write_series(state.out_dir / f"ray_{c:+g}.csv", series, ("t", "log_u"))

    fit = extract_A(result.trace, state.model, tolerances=tol)
    state.A[0.5] = fit.A
    for q, trace in result.level_traces.items():
        state.A[q] = extract_A(trace, state.model, tolerances=tol).A
    kappa = fit_log_coefficient(result.trace, state.model, tolerances=tol)
    state.check("front", "log_coefficient", 1.5 / state.constants.gamma_c, kappa.kappa, 0.03,
                relative=True, source="pde")
    state.check("front", "A_uncertainty", 0.0, fit.uncertainty, 0.02, source="pde")


def stage_renewal(state: PipelineState) -> None:
    params = state.params
    tol = get_settings().tolerances
    x, t = renewal_grid(max(params["renewal_t"], params["oracle_t"]))
    state.table = table = solve_renewal(state.model, x, t, tol)
    for c in params["c"]:
        if regime(state.model, c, state.constants) is Regime.BELOW:
            state.brackets[c] = amplitude_below_W(state.model, c, table, tolerances=tol).bracket

    t_o = params["oracle_t"]
    dump = next(s for s in state.evolution.dumps if abs(s.t - t_o) < 1e-9)
    pde_u = [math.exp(dump.log_value(xi)) for xi in params["oracle_x"]]
    renewal_u = [float(table.u_at(xi, t_o)) for xi in params["oracle_x"]]
    state.oracle = {"x": list(params["oracle_x"]), "pde": pde_u, "renewal": renewal_u}
    for xi, a, b in zip(params["oracle_x"], pde_u, renewal_u):
        state.check("oracle", f"u(x={xi:g},t={t_o:g})", a, b, 1e-4, source="renewal")


def stage_mc(state: PipelineState) -> None:
    params = state.params
    config = SimConfig.from_settings(state.model, params["oracle_t"], params["mc_n"], state.seed)
    rows = estimate_cdf(config, params["oracle_x"], workers=state.workers)
    write_table(state.out_dir / "mc.csv", [r.to_dict() for r in rows],
                ["x", "estimate", "stderr", "n_eff", "aborts"])
    # Oracle agreement is judged at three standard errors whatever the z threshold.
    widen = state.threshold / 3.0
    for r, a, b in zip(rows, state.oracle["pde"], state.oracle["renewal"]):
        quantity = f"u(x={r.x:g},t={params['oracle_t']:g})"
        state.rows.append(ComparisonRow("oracle", quantity, a, r.estimate, r.stderr * widen, source="mc",
                                        note="against pde"))
        state.rows.append(ComparisonRow("oracle", quantity, b, r.estimate, r.stderr * widen, source="mc",
                                        note="against renewal"))


def stage_analyze(state: PipelineState) -> None:
    model, constants = state.model, state.constants
    tol = get_settings().tolerances
    B, A = state.profiles[0.5].B, state.A[0.5]
    for c in state.params["c"]:
        prediction = assemble_prediction(model, c, A=A, B=B, bracket=state.brackets.get(c),
                                         constants=constants, tolerances=tol)
        if prediction.regime is Regime.ABOVE:
            state.rows.append(DeviationEstimate.theory_only(prediction, "pde"))
            continue
        state.rows.append(estimate_deviation(model, state.evolution.rays[c], "pde", prediction,
                                             tolerances=tol))
        if prediction.regime is Regime.INTERMEDIATE:
            for q in state.params["levels"]:
                other = prefactor_amplitude_intermediate(model, c, state.A[q], state.profiles[q].B, constants)
                state.check("normalization", f"C(c) with F(0)={q:g}", prediction.amplitude, other,
                            0.01, relative=True, c=c, regime=prediction.regime.value)
    middle = [row for row in state.rows if isinstance(row, DeviationEstimate)
              and row.regime is Regime.INTERMEDIATE and row.theta_fit is not None]
    scan_checks(state, middle)


def scan_checks(state: PipelineState, middle: list[DeviationEstimate]) -> None:
    """Compare fits across the intermediate velocities.

    theta must not depend on c, and the fitted psi must be a line whose
    slope joins f'(W) continuously and breaks at v_c.
    """
    if len(middle) < 2:
        return
    constants = state.constants
    tol = get_settings().tolerances
    theta_spread = tol.theta_systematic * abs(constants.theta) * math.sqrt(2.0)
    for a, b in itertools.combinations(middle, 2):
        state.rows.append(ComparisonRow(
            "theta_consistency", f"theta(c={a.c:g}) - theta(c={b.c:g})", 0.0, a.theta_fit - b.theta_fit,
            math.hypot(a.theta_err, b.theta_err), theta_spread, source=a.source, regime=Regime.INTERMEDIATE.value))

    rate = rate_function(state.model, tol)
    slope, slope_err = scan_slope(middle)
    span = max(e.c for e in middle) - min(e.c for e in middle)
    spread = tol.psi_systematic * max(abs(e.psi_theory) for e in middle) * math.sqrt(2.0) / span
    left, right = rate.derivative(constants.w), rate.derivative(constants.v_c)
    state.rows.append(ComparisonRow("psi_scan", "slope through W", left, slope, slope_err, spread,
                                    source=middle[0].source, c=constants.w, note="C1 at W"))
    state.rows.append(ComparisonRow("psi_scan", "slope jump at v_c", right - left, right - slope, slope_err, spread,
                                    source=middle[0].source, c=constants.v_c, note="kink at v_c"))


STAGES: list[tuple[str, Callable[[PipelineState], None]]] = [
    ("rates", stage_rates),
    ("wave", stage_wave),
    ("evolve", stage_evolve),
    ("renewal", stage_renewal),
    ("mc", stage_mc),
    ("analyze", stage_analyze),
]


def pipeline(config: RunConfig) -> int:
    """Run every stage in order and write the acceptance report.

    Returns:
        0 when every comparison passes, 1 otherwise. Stage failures propagate.
    """
    params = {**DEFAULT_PARAMS, **config.params}
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plan = [name for name, _ in STAGES]
    if config.dry_run:
        with open(out_dir / "plan.json", "w", encoding="utf-8") as f:
            json.dump({"stages": plan, "params": params, "config": config.to_dict()}, f, indent=2, default=str)
        logger.info("dry run", extra=fields(stages=",".join(plan)))
        return 0

    model = config.model
    if model is None:
        model = BranchingModel.load(config.model_path) if config.model_path else BranchingModel.bbm(2)
    state = PipelineState(model=model.validate(), params=params, out_dir=out_dir,
                          workers=config.workers, seed=config.seed)
    for name, stage in STAGES:
        logger.info("stage", extra=fields(stage=name, model=model.name))
        stage(state)
    summary: ReportSummary = report(state.rows, out_dir, stem="acceptance", xlsx=bool(params["xlsx"]))
    return summary.exit_status
