"""Vertically federated traffic state estimation with CTM physics regularization."""

__version__ = "0.1.0"
