"""Contrastive goal-conditioned RL on vectorized point-mass environments."""

__version__ = "0.1.0"
