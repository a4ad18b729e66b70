"""Main entry point for front-deviations."""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import __version__
from .core.analysis import DeviationEstimate, FitMode, assemble_prediction, estimate_deviation
from .core.errors import ConfigError, DeviationError, ModelError
from .core.model import BranchingModel
from .core.montecarlo import SimConfig, estimate_cdf
from .core.pde import WindowSpec, extract_A, run_evolution, write_snapshots
from .core.pipeline import pipeline
from .core.renewal import amplitude_below_W, renewal_grid, solve_renewal
from .core.report import report, write_series, write_table
from .core.spectral import Regime, front_constants, psi_scan
from .core.wave import WaveGrid, solve_wave, verify_left_identity
from .utils.config import RunConfig, Settings, set_settings
from .utils.log import configure_logging, fields

logger = logging.getLogger("front_deviations")

EXIT_OK, EXIT_ACCEPTANCE, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises ConfigError instead of exiting."""

    def error(self, message: str):
        raise ConfigError(message)


def _floats(text: str) -> list[float]:
    try:
        return [float(item) for item in text.split(",") if item.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got {text!r}") from e


def _grid(text: str) -> list[float]:
    parts = text.split(":")
    try:
        lo, hi, n = float(parts[0]), float(parts[1]), int(parts[2])
    except (IndexError, ValueError) as e:
        raise argparse.ArgumentTypeError(f"expected a grid a:b:n, got {text!r}") from e
    if len(parts) != 3 or n < 1:
        raise argparse.ArgumentTypeError(f"expected a grid a:b:n with n >= 1, got {text!r}")
    return np.linspace(lo, hi, n).tolist()


def _assignment(text: str) -> tuple[str, str, str]:
    name, sep, value = text.partition("=")
    section, dot, key = name.partition(".")
    if not sep or not dot:
        raise argparse.ArgumentTypeError(f"expected SECTION.KEY=VALUE, got {text!r}")
    return section, key, value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="front-deviations",
                     description="Large deviations of the rightmost particle of branching motions")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", type=Path, help="JSON settings file")
    parser.add_argument("--set", dest="overrides", type=_assignment, action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override one setting")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--log-format", default="kv", choices=["kv", "json"])
    parser.add_argument("--out", type=Path, default=Path("."), help="output directory")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name: str, help_text: str, model_required: bool = True) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--model", type=Path, required=model_required, help="model JSON file")
        return p

    p = command("rates", "front constants and psi over a velocity grid")
    p.add_argument("--c", type=_floats, help="velocities (default: a grid from c_min to v_c + 2)")
    p.add_argument("--c-grid", type=_grid, metavar="A:B:N", help="N evenly spaced velocities from A to B")
    p.add_argument("--step", type=float, default=0.05)

    p = command("wave", "travelling-wave profile and its left-tail identity")
    p.add_argument("--anchor", type=float, default=0.5)
    p.add_argument("--h", type=float)

    p = command("evolve", "integrate the evolution equation; front trace and ray series")
    p.add_argument("--t-end", type=float, required=True)
    p.add_argument("--dx", type=float, default=0.05)
    p.add_argument("--dt", type=float, default=0.05)
    p.add_argument("--rays", type=_floats, default=[])
    p.add_argument("--dump", type=_floats, default=[])
    p.add_argument("--level", type=float, default=0.5)

    p = command("renewal", "solve the renewal identity on a (t, x) grid")
    p.add_argument("--t-max", type=float, required=True)
    p.add_argument("--dx", type=float)
    p.add_argument("--dt", type=float)
    p.add_argument("--x", type=_floats, default=[0.0])

    p = command("amplitude", "below-W prefactor bracket from the renewal solution")
    p.add_argument("--c", type=float, required=True)
    p.add_argument("--t-max", type=float, default=16.0)
    p.add_argument("--t-star", type=float)

    p = command("mc", "Monte Carlo estimate of P(X_max(t) < x)")
    p.add_argument("--t", type=float, required=True)
    p.add_argument("--x", type=_floats, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--antithetic", action="store_true")

    p = command("analyze", "fit ray series and compare with the predictions")
    p.add_argument("--in", dest="input_dir", type=Path, required=True, help="directory with ray_<c>.csv files")
    p.add_argument("--c", type=_floats, required=True)
    p.add_argument("--constants", type=Path, help="JSON with A, B and below-W brackets")
    p.add_argument("--source", default="pde", choices=["pde", "renewal", "mc"])
    p.add_argument("--mode", default=FitMode.CONSTRAINED.value, choices=[m.value for m in FitMode])
    p.add_argument("--xlsx", action="store_true")

    p = command("pipeline", "full validation run with an acceptance report", model_required=False)
    p.add_argument("--t-end", type=float)
    p.add_argument("--mc-n", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--xlsx", action="store_true")
    p.add_argument("--dry-run", action="store_true")
    return parser


_GLOBAL = {"config", "overrides", "log_level", "log_format", "out", "command", "model", "seed",
           "workers", "dry_run"}


def parse_and_validate(argv: Sequence[str] | None = None, env: Mapping[str, str] | None = None) -> RunConfig:
    """Resolve flags, environment and config file into a validated RunConfig.

    Precedence is flags > environment > config file > defaults.

    Raises:
        ConfigError: unknown key, bad value, or a missing/invalid model file.
    """
    args = build_parser().parse_args(argv)
    env = os.environ if env is None else env
    settings = Settings(args.config)
    settings.apply_env(env)
    for section, key, raw in args.overrides:
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        settings.set(section, key, value)
    try:
        settings.tolerances
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid tolerance value: {e}") from e

    model = None
    if args.model is not None:
        if not args.model.is_file():
            raise ConfigError(f"model file not found: {args.model}")
        try:
            model = BranchingModel.load(args.model)
        except ModelError as e:
            raise ConfigError(f"{args.model}: {e}") from e

    params = {k: v for k, v in vars(args).items() if k not in _GLOBAL and v is not None}
    for key in ("workers", "n", "mc_n"):
        value = getattr(args, key, None)
        if value is not None and value < 1:
            raise ConfigError(f"--{key.replace('_', '-')} must be >= 1")
    return RunConfig(
        command=args.command,
        model_path=args.model,
        params=params,
        output_dir=args.out,
        seed=getattr(args, "seed", 0),
        workers=getattr(args, "workers", 1),
        dry_run=getattr(args, "dry_run", False),
        settings=settings,
        model=model,
        log_level=args.log_level,
        log_format=args.log_format,
    )


def _dump_json(path: Path, data) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, default=str)


def run_rates(config: RunConfig) -> int:
    model, p = config.model, config.params
    constants = front_constants(model)
    c_grid = p.get("c") or p.get("c_grid") or np.round(np.arange(-4.0, constants.v_c + 2.0, p["step"]), 10)
    write_table(config.output_dir / "rates.csv", psi_scan(model, c_grid), ["c", "regime", "psi", "theta", "notes"])
    _dump_json(config.output_dir / "constants.json", {"model": model.to_dict(), **constants.to_dict()})
    return EXIT_OK


def run_wave(config: RunConfig) -> int:
    model, p = config.model, config.params
    grid = WaveGrid.from_settings()
    if "h" in p:
        grid = WaveGrid(h=p["h"], z_min=grid.z_min, z_max=grid.z_max)
    profile = solve_wave(model, grid, p["anchor"])
    residual = verify_left_identity(profile, model)
    profile.write_csv(config.output_dir / "wave.csv")
    profile.write_summary(config.output_dir / "wave.json")
    tol = config.settings.tolerances
    return EXIT_OK if residual <= tol.identity else EXIT_ACCEPTANCE


def run_evolve(config: RunConfig) -> int:
    model, p = config.model, config.params
    result = run_evolution(model, p["t_end"], p["dx"], p["dt"], rays=p["rays"], dump_times=p["dump"],
                           level=p["level"], window=WindowSpec.from_settings())
    out = config.output_dir
    write_series(out / "trace.csv", result.trace, ("t", "x_half"))
    for c, series in result.rays.items():
        write_series(out / f"ray_{c:+g}.csv", series, ("t", "log_u"))
    if result.dumps:
        write_snapshots(out / "snapshots.bin", result.dumps)
    summary = {"t_end": p["t_end"], "level": p["level"], "outputs": int(result.trace.shape[0])}
    if model.alpha > 0:
        try:
            summary["front_fit"] = extract_A(result.trace, model).to_dict()
        except DeviationError as e:
            logger.warning("front shift not fitted", extra=fields(reason=str(e)))
    _dump_json(out / "evolve.json", summary)
    return EXIT_OK


def run_renewal(config: RunConfig) -> int:
    model, p = config.model, config.params
    x, t = renewal_grid(p["t_max"], p.get("dx"), p.get("dt"))
    table = solve_renewal(model, x, t)
    table.save(config.output_dir / "renewal.bin")
    rows = [{"x": xi, "t": float(t[-1]), "u": float(table.u_at(xi, float(t[-1])))} for xi in p["x"]]
    write_table(config.output_dir / "renewal.csv", rows, ["x", "t", "u"])
    return EXIT_OK


def run_amplitude(config: RunConfig) -> int:
    model, p = config.model, config.params
    x, t = renewal_grid(p["t_max"])
    result = amplitude_below_W(model, p["c"], solve_renewal(model, x, t), p.get("t_star"))
    _dump_json(config.output_dir / "amplitude.json", result.to_dict())
    return EXIT_OK


def run_mc(config: RunConfig) -> int:
    p = config.params
    section = config.settings.section("mc")
    sim = SimConfig(config.model, p["t"], p["n"], config.seed, int(section["population_cap"]),
                    p["antithetic"], int(section["block_size"]))
    rows = [r.to_dict() for r in estimate_cdf(sim, p["x"], workers=config.workers)]
    write_table(config.output_dir / "mc.csv", rows, ["x", "estimate", "stderr", "n_eff", "aborts"])
    _dump_json(config.output_dir / "mc.json", {"t": p["t"], "n": p["n"], "seed": config.seed, "rows": rows})
    return EXIT_OK


def _read_series(path: Path) -> np.ndarray:
    if not path.is_file():
        raise ConfigError(f"series file not found: {path}")
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def run_analyze(config: RunConfig) -> int:
    model, p = config.model, config.params
    constants = front_constants(model)
    extra = {}
    if "constants" in p:
        if not p["constants"].is_file():
            raise ConfigError(f"constants file not found: {p['constants']}")
        with open(p["constants"], encoding="utf-8") as f:
            extra = json.load(f)
    brackets = {float(c): float(v) for c, v in extra.get("brackets", {}).items()}
    items = []
    for c in p["c"]:
        prediction = assemble_prediction(model, c, A=extra.get("A"), B=extra.get("B"),
                                         bracket=brackets.get(c), constants=constants)
        if prediction.regime is Regime.ABOVE:
            items.append(DeviationEstimate.theory_only(prediction, p["source"]))
            continue
        series = _read_series(p["input_dir"] / f"ray_{c:+g}.csv")
        items.append(estimate_deviation(model, series, p["source"], prediction, p["mode"]))
    summary = report(items, config.output_dir, stem="report", xlsx=p["xlsx"])
    return summary.exit_status


def run_pipeline(config: RunConfig) -> int:
    p = config.params
    overrides = {"t_end": p.get("t_end"), "mc_n": p.get("mc_n"), "xlsx": p.get("xlsx") or None}
    config.params = {k: v for k, v in overrides.items() if v is not None}
    return pipeline(config)


HANDLERS = {
    "rates": run_rates,
    "wave": run_wave,
    "evolve": run_evolve,
    "renewal": run_renewal,
    "amplitude": run_amplitude,
    "mc": run_mc,
    "analyze": run_analyze,
    "pipeline": run_pipeline,
}


def exit_code(error: BaseException) -> int:
    """Map an exception to the process exit status."""
    if isinstance(error, (ConfigError, ModelError)):
        return EXIT_CONFIG
    return EXIT_NUMERICAL


def main(argv: Sequence[str] | None = None, env: Mapping[str, str] | None = None) -> int:
    """Main entry point."""
    try:
        config = parse_and_validate(argv, env)
    except ConfigError as e:
        print(f"front-deviations: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    configure_logging(config.log_level, config.log_format)
    set_settings(config.settings)
    config.output_dir.mkdir(parents=True, exist_ok=True)
    logger.info("start", extra=fields(command=config.command, model=str(config.model_path or ""),
                                      out=str(config.output_dir)))
    try:
        status = HANDLERS[config.command](config)
    except DeviationError as e:
        status = exit_code(e)
        logger.error("failed", extra=fields(command=config.command, error=type(e).__name__, reason=str(e)))
        return status
    logger.info("done", extra=fields(command=config.command, status=status))
    return status


if __name__ == "__main__":
    sys.exit(main())
