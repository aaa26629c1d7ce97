"""Personalized constrained federated averaging and penalized baselines."""

__version__ = "0.1.0"
