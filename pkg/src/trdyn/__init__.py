"""Rigid-particle translation-rotation dynamics: fitting, extrapolation, segmentation."""

__version__ = "0.1.0"
