"""Adaptive denoising training for implicit-feedback recommenders, in numpy."""

__version__ = "0.1.0"
