"""Recurrent switching linear dynamical systems with Pólya-gamma Gibbs sampling and structured SVI."""

__version__ = "0.1.0"
