"""Leakage-safe temporal feature engineering for hour-resolution event logs."""

__version__ = "0.1.0"
