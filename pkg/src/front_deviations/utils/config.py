"""Run configuration: tolerances, layered settings and the resolved run config."""

import copy
import json
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path
from typing import Any, Mapping

from ..core.errors import ConfigError

ENV_PREFIX = "FRONT_DEVIATIONS_"


@dataclass(frozen=True)
class Tolerances:
    """Numerical thresholds used across the solvers."""
    scalar_rtol: float = 1e-12
    root_xtol: float = 1e-13
    wave_residual: float = 1e-8
    wave_slope_window: float = 5e-3
    identity: float = 5e-3
    tail_fraction: float = 0.10
    picard: float = 1e-2
    amplitude_tail: float = 0.05
    front_fit_rms: float = 1e-2
    fit_condition: float = 1e8
    zscore: float = 4.0
    max_abort_fraction: float = 1e-3
    monotone: float = 1e-9
    psi_systematic: float = 2.5e-3
    theta_systematic: float = 2.5e-2
    amp_systematic: float = 3.75e-2

    def to_dict(self) -> dict:
        """Convert to dictionary for JSON serialization."""
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Tolerances":
        """Create from dictionary, rejecting unknown keys."""
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown tolerance key: tolerances.{unknown[0]}")
        return cls(**{k: float(v) for k, v in data.items()})


DEFAULT_TOLERANCES = Tolerances()


class Settings:
    """Layered settings: defaults < config file < environment < flags."""

    DEFAULT_CONFIG: dict[str, dict[str, Any]] = {
        "tolerances": DEFAULT_TOLERANCES.to_dict(),
        "pde": {
            "c_min": -4.0,
            "margin_left": 20.0,
            "margin_right": 30.0,
            "t_switch": 1.0,
            "transient": 10.0,
            "output_every": 1.0,
        },
        "wave": {
            "h": 0.02,
            "z_min": None,
            "z_max": None,
        },
        "renewal": {
            "dx": 0.05,
            "dt": 0.01,
            "x_min": -60.0,
            "x_max": 60.0,
            "t_star": 4.0,
        },
        "mc": {
            "population_cap": 10_000_000,
            "block_size": 1024,
        },
        "analysis": {
            "t_min": 10.0,
            "t_max": None,
        },
    }

    def __init__(self, config_file: str | Path | None = None):
        """Initialize settings.

        Args:
            config_file: Optional JSON file overriding the defaults.
        """
        self._config: dict[str, dict[str, Any]] = copy.deepcopy(self.DEFAULT_CONFIG)
        self.config_file = Path(config_file) if config_file else None
        if self.config_file is not None:
            self._load()

    def _load(self) -> None:
        """Load overrides from the config file."""
        if not self.config_file.exists():
            raise ConfigError(f"config file not found: {self.config_file}")
        try:
            with open(self.config_file, "r", encoding="utf-8") as f:
                loaded = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {self.config_file} is not valid JSON: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {self.config_file} must hold a JSON object")
        for section, values in loaded.items():
            if not isinstance(values, dict):
                raise ConfigError(f"config section '{section}' must be an object")
            for key, value in values.items():
                self.set(section, key, value)

    def apply_env(self, env: Mapping[str, str]) -> None:
        """Apply FRONT_DEVIATIONS_<SECTION>__<KEY> overrides.

        Values are parsed as JSON literals, falling back to the raw string.
        """
        for name, raw in env.items():
            if not name.startswith(ENV_PREFIX):
                continue
            path = name[len(ENV_PREFIX):].lower()
            if "__" not in path:
                raise ConfigError(f"environment override {name} must look like "
                                  f"{ENV_PREFIX}<SECTION>__<KEY>")
            section, key = path.split("__", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            self.set(section, key, value)

    def get(self, section: str, key: str, default: Any = None) -> Any:
        """Get a setting value."""
        return self._config.get(section, {}).get(key, default)

    def set(self, section: str, key: str, value: Any) -> None:
        """Set a setting value, rejecting unknown sections and keys."""
        if section not in self._config:
            raise ConfigError(f"unknown config section: {section}")
        if key not in self._config[section]:
            raise ConfigError(f"unknown config key: {section}.{key}")
        self._config[section][key] = value

    def section(self, name: str) -> dict[str, Any]:
        """Get a copy of one section."""
        if name not in self._config:
            raise ConfigError(f"unknown config section: {name}")
        return dict(self._config[name])

    @property
    def tolerances(self) -> Tolerances:
        """Tolerances resolved from the 'tolerances' section."""
        return Tolerances.from_dict(self._config["tolerances"])

    def to_dict(self) -> dict:
        """Convert to dictionary for JSON serialization."""
        return copy.deepcopy(self._config)


@dataclass
class RunConfig:
    """Fully resolved configuration of one command-line invocation."""
    command: str
    model_path: Path | None = None
    params: dict[str, Any] = field(default_factory=dict)
    output_dir: Path = Path(".")
    seed: int = 0
    workers: int = 1
    dry_run: bool = False
    settings: Settings = field(default_factory=Settings)
    model: Any = None
    log_level: str = "INFO"
    log_format: str = "kv"

    def to_dict(self) -> dict:
        """Convert to dictionary for JSON serialization."""
        return {
            "command": self.command,
            "model_path": str(self.model_path) if self.model_path else None,
            "params": self.params,
            "output_dir": str(self.output_dir),
            "seed": self.seed,
            "workers": self.workers,
            "dry_run": self.dry_run,
            "settings": self.settings.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        """Rebuild a run configuration written by :meth:`to_dict`."""
        settings = Settings()
        for section, values in data.get("settings", {}).items():
            for key, value in values.items():
                settings.set(section, key, value)
        model_path = data.get("model_path")
        return cls(
            command=data["command"],
            model_path=Path(model_path) if model_path else None,
            params=dict(data.get("params", {})),
            output_dir=Path(data.get("output_dir", ".")),
            seed=int(data.get("seed", 0)),
            workers=int(data.get("workers", 1)),
            dry_run=bool(data.get("dry_run", False)),
            settings=settings,
        )


# Global settings instance
_settings: Settings | None = None


def get_settings() -> Settings:
    """Get the global settings instance."""
    global _settings
    if _settings is None:
        _settings = Settings()
    return _settings


def set_settings(settings: Settings) -> None:
    """Replace the global settings instance (done once by the command line)."""
    global _settings
    _settings = settings
