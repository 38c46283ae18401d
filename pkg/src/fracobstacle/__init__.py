"""Nonlocal parabolic obstacle problems: lattice operators, penalized and projected solvers, extension and regularity diagnostics."""

__version__ = "0.1.0"
