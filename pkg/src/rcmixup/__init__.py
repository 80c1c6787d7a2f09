"""Robust C-Mixup for noisy regression data."""

__version__ = "0.1.0"
