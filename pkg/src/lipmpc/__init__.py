"""Lipschitz-constrained neural models with certification and predictive
control for a benchmark exothermic reactor."""

__version__ = "0.1.0"
