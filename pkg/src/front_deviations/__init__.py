"""Front Deviations - large deviations of the rightmost particle of branching motions."""

__version__ = "0.1.0"
