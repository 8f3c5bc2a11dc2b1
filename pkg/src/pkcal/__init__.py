"""Calibration of computer models with projected kernels."""

__version__ = "0.1.0"
