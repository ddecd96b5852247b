"""Simulation and verification tools for multiscale multivalued SDEs."""

__version__ = "0.1.0"
