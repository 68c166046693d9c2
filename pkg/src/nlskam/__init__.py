"""Numerical KAM construction and stability checks for lattice NLS models."""

__version__ = "0.1.0"
