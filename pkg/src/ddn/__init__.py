"""Discrete-distribution networks: hierarchical K-way generative layers
trained with split-and-prune, plus guided samplers, a 1-D latent codec,
and direct-parameter density-fitting toys."""

__version__ = "0.1.0"
