"""Fokker-Planck evolution of normalizing-flow densities by a time-dependent variational principle."""

__version__ = "0.1.0"
