"""Latent-space EBM generative replay with progressive prompt selection for
continual learning, on a from-scratch numpy autodiff core."""

__version__ = "0.1.0"
