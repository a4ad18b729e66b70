"""Tests for Front Deviations."""
