"""Desk-scale numerical laboratory for slightly compressible Brinkman-Forchheimer flow."""

from . import analysis, cli, dynamics, grid, physics, reference, rng

__all__ = ["analysis", "cli", "dynamics", "grid", "physics", "reference", "rng"]
__version__ = "0.1.0"
