"""Simulation and detection of misconfigured PV reactive-power control in low-voltage grids."""

__version__ = "0.1.0"
