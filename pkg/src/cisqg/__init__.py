"""Spectral laboratory for a stochastic convex-integration scheme for SQG on the 2-torus."""

__version__ = "0.1.0"
