"""Bias of proximal causal estimators under linear structural equation models."""

__version__ = "0.1.0"
