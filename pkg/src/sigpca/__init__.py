"""Sig-PCA: path-signature summaries of gridded model output for observation correction."""

__version__ = "0.1.0"
