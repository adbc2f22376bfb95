"""Advantage-conditioned adversarial perturbation generation for RL policies."""

__version__ = "0.1.0"
