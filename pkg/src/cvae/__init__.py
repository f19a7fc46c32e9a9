"""Contrastive variational autoencoder on a small numpy/numba core."""

__version__ = "0.1.0"
