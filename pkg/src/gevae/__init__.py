"""Permutation-invariant latent-variable generative model of graph structure.

Spectral node embeddings are mapped through a normalizing flow to a latent
set; a set-attention decoder produces nonnegative node features whose inner
products are Poisson rates of a Bernoulli-Exponential edge link.
"""

__version__ = "0.1.0"
