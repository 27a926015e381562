"""Learned action masking for RL-based robotic palletization."""

__version__ = "0.1.0"
