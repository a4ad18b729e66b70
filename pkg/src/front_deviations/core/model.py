"""Branching process definition and model-file handling."""

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ModelError
from .expression import DensityExpression

# exp() overflows just above 709; the cumulant domain stops well short of it.
GAMMA_EXP_LIMIT = 700.0


class KernelKind(str, Enum):
    """How the jump kernel was specified."""
    NONE = "none"
    ATOMS = "atoms"
    DENSITY = "density"
    TABLE = "density_table"


@dataclass(frozen=True, eq=False)
class JumpKernel:
    """Finite jump-rate measure rho, stored as weighted atoms.

    Densities are reduced to atoms by quadrature: ``rates[i]`` is the rate mass
    carried by displacement ``displacements[i]``.
    """
    displacements: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rates: np.ndarray = field(default_factory=lambda: np.zeros(0))
    kind: KernelKind = KernelKind.NONE
    source: Any = None

    def __post_init__(self):
        y = np.asarray(self.displacements, dtype=float).reshape(-1)
        r = np.asarray(self.rates, dtype=float).reshape(-1)
        if y.shape != r.shape:
            raise ModelError("jump displacements and rates must have the same length")
        if np.any(r < 0) or not np.all(np.isfinite(r)) or not np.all(np.isfinite(y)):
            raise ModelError("jump rates must be finite and nonnegative")
        keep = r > 0
        object.__setattr__(self, "displacements", y[keep])
        object.__setattr__(self, "rates", r[keep])

    @classmethod
    def none(cls) -> "JumpKernel":
        """Kernel without jumps."""
        return cls()

    @classmethod
    def from_atoms(cls, atoms: list[tuple[float, float]]) -> "JumpKernel":
        """Create from (displacement, rate) pairs."""
        if not atoms:
            return cls.none()
        y, r = zip(*atoms)
        source = [{"y": float(a), "rate": float(b)} for a, b in atoms]
        return cls(np.array(y, dtype=float), np.array(r, dtype=float), KernelKind.ATOMS, source)

    @classmethod
    def from_table(cls, rows: list[list[float]]) -> "JumpKernel":
        """Create from a tabulated density [[y, rho], ...] with trapezoid weights."""
        table = np.asarray(rows, dtype=float)
        if table.ndim != 2 or table.shape[1] != 2 or table.shape[0] < 2:
            raise ModelError("density_table must be a list of at least two [y, rho] rows")
        y, rho = table[:, 0], table[:, 1]
        if np.any(np.diff(y) <= 0):
            raise ModelError("density_table displacements must be strictly increasing")
        dy = np.diff(y)
        weights = np.zeros_like(y)
        weights[:-1] += dy / 2
        weights[1:] += dy / 2
        return cls(y, weights * rho, KernelKind.TABLE, table.tolist())

    @classmethod
    def from_density(
        cls,
        expression: str,
        support: tuple[float, float],
        nodes: int = 32,
        parameters: dict[str, float] | None = None,
        rtol: float = 1e-12,
        max_nodes: int = 1024,
    ) -> "JumpKernel":
        """Create from a density expression by adaptive Gauss-Legendre quadrature.

        The node count doubles until the total rate and the exponential moments
        at gamma = +-1 agree between consecutive rules to ``rtol``.
        """
        a, b = float(support[0]), float(support[1])
        if not b > a:
            raise ModelError(f"density support must satisfy a < b, got [{a}, {b}]")
        density = DensityExpression(expression, parameters)

        def rule(n: int) -> tuple[np.ndarray, np.ndarray]:
            x, w = np.polynomial.legendre.leggauss(n)
            y = 0.5 * (b - a) * x + 0.5 * (a + b)
            return y, 0.5 * (b - a) * w * density.evaluate(y)

        def moments(y: np.ndarray, r: np.ndarray) -> np.ndarray:
            return np.array([r.sum(), (r * np.exp(y)).sum(), (r * np.exp(-y)).sum()])

        n = max(int(nodes), 2)
        y, r = rule(n)
        previous = moments(y, r)
        while n < max_nodes:
            y2, r2 = rule(2 * n)
            current = moments(y2, r2)
            n *= 2
            y, r = y2, r2
            if np.all(np.abs(current - previous) <= rtol * np.abs(current)):
                break
            previous = current
        source = {**density.to_dict(), "support": [a, b], "nodes": n}
        return cls(y, r, KernelKind.DENSITY, source)

    @property
    def total_rate(self) -> float:
        """lambda = integral of rho."""
        return float(self.rates.sum())

    @property
    def is_empty(self) -> bool:
        return self.rates.size == 0

    def lattice_step(self, rtol: float = 1e-9) -> float | None:
        """Common lattice spacing of the atoms, or None when they are off-lattice."""
        if self.is_empty:
            return None
        nonzero = np.abs(self.displacements[self.displacements != 0])
        if nonzero.size == 0:
            return None
        step = float(nonzero.min())
        ratios = self.displacements / step
        if np.all(np.abs(ratios - np.round(ratios)) <= rtol * np.maximum(1.0, np.abs(ratios))):
            return step
        return None

    def to_dict(self) -> Any:
        """Convert to the model-file representation."""
        if self.kind == KernelKind.NONE:
            return []
        if self.kind == KernelKind.TABLE:
            return {"density_table": self.source}
        return self.source

    @classmethod
    def from_dict(cls, data: Any) -> "JumpKernel":
        """Parse the ``jumps`` entry of a model file."""
        if data is None or data == []:
            return cls.none()
        if isinstance(data, list):
            atoms = []
            for i, entry in enumerate(data):
                if not isinstance(entry, dict) or set(entry) != {"y", "rate"}:
                    raise ModelError(f"jumps[{i}] must be an object with keys 'y' and 'rate'")
                atoms.append((float(entry["y"]), float(entry["rate"])))
            return cls.from_atoms(atoms)
        if isinstance(data, dict) and "density_table" in data:
            if set(data) != {"density_table"}:
                raise ModelError("jumps with 'density_table' accept no other keys")
            return cls.from_table(data["density_table"])
        if isinstance(data, dict) and "density" in data:
            unknown = set(data) - {"density", "support", "nodes", "parameters"}
            if unknown:
                raise ModelError(f"unknown jumps key: {sorted(unknown)[0]}")
            if "support" not in data:
                raise ModelError("jumps with 'density' need a 'support' [a, b]")
            return cls.from_density(
                str(data["density"]),
                tuple(data["support"]),
                int(data.get("nodes", 32)),
                data.get("parameters"),
            )
        raise ModelError("jumps must be a list of {y, rate}, {density_table} or {density, support}")


@dataclass(frozen=True, eq=False)
class BranchingModel:
    """One continuous-time branching random walk / branching Brownian motion.

    Between events a particle diffuses with ``<(X(t)-X(t'))^2> = 2 D |t-t'|``,
    jumps by y at rate rho(y) dy and splits into k particles at rate p_k.
    """
    diffusion: float = 1.0
    jumps: JumpKernel = field(default_factory=JumpKernel.none)
    offspring: tuple[tuple[int, float], ...] = ((2, 1.0),)
    name: str = ""

    def __post_init__(self):
        if not (math.isfinite(self.diffusion) and self.diffusion >= 0):
            raise ModelError(f"diffusion must be finite and nonnegative, got {self.diffusion}")
        channels = []
        for k, rate in self.offspring:
            if int(k) != k or k < 2:
                raise ModelError(f"offspring k must be an integer with k >= 2, got k={k}")
            if not (math.isfinite(rate) and rate >= 0):
                raise ModelError(f"offspring rate p_{k} must be finite and nonnegative, got {rate}")
            channels.append((int(k), float(rate)))
        if len({k for k, _ in channels}) != len(channels):
            raise ModelError("offspring entries must have distinct k")
        object.__setattr__(self, "offspring", tuple(sorted(channels)))
        if self.diffusion == 0 and self.jumps.total_rate == 0:
            raise ModelError("degenerate motion: need diffusion > 0 or a jump kernel")

    # -- derived rates -------------------------------------------------------

    @property
    def alpha(self) -> float:
        """Total branching rate, sum of p_k."""
        return float(sum(rate for _, rate in self.offspring))

    @property
    def beta(self) -> float:
        """Growth rate of the mean population, sum of (k-1) p_k."""
        return float(sum((k - 1) * rate for k, rate in self.offspring))

    @property
    def jump_rate(self) -> float:
        """lambda, the total jump rate."""
        return self.jumps.total_rate

    @property
    def max_offspring(self) -> int:
        return max((k for k, rate in self.offspring if rate > 0), default=1)

    @property
    def is_local(self) -> bool:
        """True for pure branching Brownian motion (no jump kernel)."""
        return self.jumps.is_empty

    @property
    def gamma_domain(self) -> tuple[float, float]:
        """Open interval of gamma on which the cumulant is finite and representable."""
        y = self.jumps.displacements
        pos = y[y > 0]
        neg = y[y < 0]
        hi = GAMMA_EXP_LIMIT / pos.max() if pos.size else math.inf
        lo = -GAMMA_EXP_LIMIT / (-neg.min()) if neg.size else -math.inf
        return lo, hi

    def in_domain(self, gamma) -> bool:
        lo, hi = self.gamma_domain
        g = np.asarray(gamma, dtype=float)
        return bool(np.all((g > lo) & (g < hi)))

    def validate(self) -> "BranchingModel":
        """Check the invariants needed by the large-deviation machinery.

        Returns:
            The model itself, for chaining.
        """
        if self.alpha <= 0:
            raise ModelError("at least one branching channel with p_k > 0 is required")
        near_zero = np.array([-1e-3, 1e-3])
        if not np.all(np.isfinite(self.cumulant(near_zero))):
            raise ModelError("exponential moments of the jump kernel are not finite near 0")
        return self

    # -- cumulant of the free motion ----------------------------------------

    def cumulant(self, gamma, order: int = 0):
        """g(gamma) = D gamma^2 + int (e^{gamma y} - 1) rho(y) dy and its derivatives.

        Args:
            gamma: Scalar or array.
            order: 0, 1 or 2 for g, g' or g''.
        """
        g = np.asarray(gamma, dtype=float)
        y = self.jumps.displacements
        r = self.jumps.rates
        D = self.diffusion
        e = np.exp(np.multiply.outer(g, y)) if y.size else np.zeros(g.shape + (0,))
        if order == 0:
            value = D * g**2 + ((e - 1.0) * r).sum(axis=-1)
        elif order == 1:
            value = 2.0 * D * g + (e * (r * y)).sum(axis=-1)
        elif order == 2:
            value = 2.0 * D + (e * (r * y**2)).sum(axis=-1)
        else:
            raise ValueError(f"order must be 0, 1 or 2, got {order}")
        return float(value) if np.ndim(value) == 0 else value

    def characteristic_exponent(self, theta) -> np.ndarray:
        """g(i theta), the log-characteristic function per unit time."""
        th = np.asarray(theta, dtype=float)
        y = self.jumps.displacements
        r = self.jumps.rates
        jump = ((np.exp(1j * np.multiply.outer(th, y)) - 1.0) * r).sum(axis=-1) if y.size else 0.0
        return -self.diffusion * th**2 + jump

    # -- branching nonlinearity ---------------------------------------------

    def offspring_sum(self, u) -> np.ndarray:
        """sum_k p_k u^k."""
        u = np.asarray(u, dtype=float)
        total = np.zeros_like(u)
        for k, rate in self.offspring:
            total = total + rate * u**k
        return total

    def offspring_sum_derivative(self, u) -> np.ndarray:
        """d/du sum_k p_k u^k."""
        u = np.asarray(u, dtype=float)
        total = np.zeros_like(u)
        for k, rate in self.offspring:
            total = total + k * rate * u ** (k - 1)
        return total

    # -- construction and persistence ---------------------------------------

    @classmethod
    def bbm(cls, m: int = 2, diffusion: float = 1.0, rate: float = 1.0) -> "BranchingModel":
        """Branching Brownian motion splitting into m particles at the given rate."""
        return cls(diffusion=diffusion, offspring=((m, rate),), name=f"bbm-m{m}")

    @classmethod
    def from_atoms(
        cls,
        atoms: list[tuple[float, float]],
        offspring: dict[int, float],
        diffusion: float = 0.0,
        name: str = "",
    ) -> "BranchingModel":
        """Branching random walk with an atomic jump kernel."""
        return cls(
            diffusion=diffusion,
            jumps=JumpKernel.from_atoms(atoms),
            offspring=tuple(offspring.items()),
            name=name,
        )

    def to_dict(self) -> dict:
        """Convert to dictionary for JSON serialization."""
        return {
            "name": self.name,
            "diffusion": self.diffusion,
            "jumps": self.jumps.to_dict(),
            "offspring": [{"k": k, "rate": rate} for k, rate in self.offspring],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BranchingModel":
        """Create from dictionary, rejecting unknown keys."""
        if not isinstance(data, dict):
            raise ModelError("model definition must be a JSON object")
        unknown = set(data) - {"name", "diffusion", "jumps", "offspring"}
        if unknown:
            raise ModelError(f"unknown model key: {sorted(unknown)[0]}")
        if "offspring" not in data:
            raise ModelError("model definition needs an 'offspring' list")
        offspring = []
        for i, entry in enumerate(data["offspring"]):
            if not isinstance(entry, dict) or set(entry) != {"k", "rate"}:
                raise ModelError(f"offspring[{i}] must be an object with keys 'k' and 'rate'")
            offspring.append((entry["k"], float(entry["rate"])))
        return cls(
            diffusion=float(data.get("diffusion", 0.0)),
            jumps=JumpKernel.from_dict(data.get("jumps")),
            offspring=tuple(offspring),
            name=str(data.get("name", "")),
        )

    def save(self, path: str | Path) -> None:
        """Save the model definition to a JSON file."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, ensure_ascii=False, indent=2)

    @classmethod
    def load(cls, path: str | Path) -> "BranchingModel":
        """Load and validate a model definition file."""
        with open(path, "r", encoding="utf-8") as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise ModelError(f"model file {path} is not valid JSON: {e}") from e
        model = cls.from_dict(data)
        if not model.name:
            object.__setattr__(model, "name", Path(path).stem)
        return model.validate()
