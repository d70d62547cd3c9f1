"""Simulated control plane for collaborative hyper-parameter tuning and SLO-aware inference."""

__version__ = "0.1.0"
