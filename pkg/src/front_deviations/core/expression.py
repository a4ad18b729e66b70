"""Jump-density expressions evaluated safely with simpleeval."""

import math
from typing import Any

import numpy as np
from simpleeval import EvalWithCompoundTypes

from .errors import ModelError


class DensityExpression:
    """A jump-rate density rho(y) written as an expression in ``y``.

    Example: ``"0.5 * exp(-abs(y))"`` or ``"lam / sqrt(2*pi) * exp(-y**2 / 2)"``
    with ``lam`` supplied as a parameter.
    """

    def __init__(self, source: str, parameters: dict[str, float] | None = None):
        """Initialize the expression.

        Args:
            source: Expression text; the free variable is ``y``.
            parameters: Extra named constants available to the expression.
        """
        self.source = source
        self.parameters = dict(parameters or {})
        self._functions = {
            "exp": math.exp,
            "log": math.log,
            "sqrt": math.sqrt,
            "abs": abs,
            "cosh": math.cosh,
            "sinh": math.sinh,
            "tanh": math.tanh,
            "min": min,
            "max": max,
        }
        self._names = {"pi": math.pi, "e": math.e, **self.parameters}

    def _evaluate_one(self, y: float) -> float:
        names = dict(self._names)
        names["y"] = float(y)
        evaluator = EvalWithCompoundTypes(functions=self._functions, names=names)
        try:
            value = evaluator.eval(self.source)
        except Exception as e:
            raise ModelError(f"Failed to evaluate density '{self.source}' at y={y}: {e}") from e
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ModelError(f"density '{self.source}' returned non-numeric value {value!r}")
        return float(value)

    def evaluate(self, y: Any) -> np.ndarray:
        """Evaluate rho at each of the given points.

        Returns:
            Array of density values; negative values raise ModelError.
        """
        points = np.atleast_1d(np.asarray(y, dtype=float))
        values = np.array([self._evaluate_one(p) for p in points])
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ModelError(f"density '{self.source}' must be finite and nonnegative on its support")
        return values

    def to_dict(self) -> dict:
        """Convert to dictionary for JSON serialization."""
        data = {"density": self.source}
        if self.parameters:
            data["parameters"] = dict(self.parameters)
        return data
