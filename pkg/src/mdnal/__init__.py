"""Mixture-density detection heads and uncertainty-driven active learning."""

__version__ = "0.1.0"
