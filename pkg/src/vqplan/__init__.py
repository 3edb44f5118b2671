"""Learned sampling distributions for highway trajectory planning.

A VQ-VAE with a quadratic-program decoder maps discrete latent codes to
polynomial trajectories, an autoregressive prior samples those codes from
traffic observations, and an unrolled barrier-function filter projects the
samples onto the safe set.
"""
__version__ = "0.1.0"
