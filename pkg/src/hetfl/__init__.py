"""Trace-driven simulator for heterogeneity-aware cross-device federated learning."""

__version__ = "0.1.0"
