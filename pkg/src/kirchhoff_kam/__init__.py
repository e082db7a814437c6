"""Numerical engine for constructing linearly stable invariant tori of a
Galerkin-truncated forced Kirchhoff equation by iterated symplectic
normal-form reduction."""

from .jets import ParamJet
from .series import Budget, Domain, MonoKey, TFSeries, weighted_conv_norm

__all__ = [
    "ParamJet",
    "Budget",
    "Domain",
    "MonoKey",
    "TFSeries",
    "weighted_conv_norm",
]

__version__ = "0.1.0"
