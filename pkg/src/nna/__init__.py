"""Animatable neural human renderer from sparse calibrated views."""

__version__ = "0.1.0"
