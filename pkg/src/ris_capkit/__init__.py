"""Deterministic-equivalent sum-MI analysis for RIS-assisted MIMO multiple-access channels."""

__version__ = "0.1.0"
