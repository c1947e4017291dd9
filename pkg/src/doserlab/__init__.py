"""Diffusion-based OOD detection and selective regularization for offline RL, at toy scale."""

__version__ = "0.1.0"
