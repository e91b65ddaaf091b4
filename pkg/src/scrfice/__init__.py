"""Causal inference for semi-competing risks: simulation, fitting, bounds and sensitivity analysis."""

__version__ = "0.1.0"
