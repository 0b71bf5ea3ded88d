"""Differentiable 2D MLS-MPM soft-body simulation with a hand-derived adjoint."""
__version__ = "0.1.0"
