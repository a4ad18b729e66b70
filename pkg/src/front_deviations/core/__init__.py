"""Core solvers for Front Deviations."""
