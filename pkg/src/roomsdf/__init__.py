"""Compositional indoor SDF reconstruction on analytic synthetic scenes."""

__version__ = "0.1.0"
