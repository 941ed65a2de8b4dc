"""Differentiable architecture search in the L-chain macro space with interleaving-free sampling."""

__version__ = "0.1.0"
