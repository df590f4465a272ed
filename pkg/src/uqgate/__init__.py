"""Uncertainty gating toolkit for exported classifier predictions."""

__version__ = "0.1.0"
