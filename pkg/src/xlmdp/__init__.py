"""Layered MDP solvers and a reference cross-layer wireless stack."""

__version__ = "0.1.0"
