"""Exception hierarchy shared by all solvers."""


class DeviationError(Exception):
    """Base class for every error raised by front_deviations."""


class ModelError(DeviationError, ValueError):
    """Invalid model definition or an argument outside a model's domain."""


class ConfigError(DeviationError):
    """Invalid run configuration (command line, environment or config file)."""


class ConvergenceError(DeviationError):
    """A numerical procedure failed to converge."""


class FrontError(ConvergenceError):
    """Critical front or transition velocity could not be located."""


class WaveError(ConvergenceError):
    """Travelling-wave relaxation failed or its tail could not be certified."""


class SchemeError(ConvergenceError):
    """Time-stepping contract violated (stability or monotonicity)."""


class InversionError(ConvergenceError):
    """Numeric Fourier inversion of the propagator did not converge."""


class RenewalError(ConvergenceError):
    """Renewal stepper or amplitude integral could not meet its tolerance."""


class WindowError(DeviationError):
    """A requested point left the computational window."""


class FitError(DeviationError):
    """A least-squares fit was refused (too few points, ill-conditioned, poor residual)."""


class AnalysisError(DeviationError):
    """Prediction could not be assembled (missing constants, wrong regime)."""


class PopulationCapError(DeviationError):
    """A simulated sample exceeded the particle population cap."""


class MonteCarloError(DeviationError):
    """Monte Carlo estimate refused (too many aborted samples)."""
