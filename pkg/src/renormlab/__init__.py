"""Exact and Monte Carlo tools for renormalization-group maps of lattice Gibbs measures."""

__version__ = "0.1.0"
