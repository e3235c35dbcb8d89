"""Isoparametric ALE virtual element solvers for moving-domain convection-diffusion."""

__version__ = "0.1.0"
