"""Simulation and verification laboratory for critical Gaussian multiplicative chaos."""

__version__ = "0.1.0"
