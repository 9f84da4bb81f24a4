"""Momentum-contrast speaker representation learning on a synthetic corpus."""

__version__ = "0.1.0"
