"""Utility functions for Front Deviations."""
