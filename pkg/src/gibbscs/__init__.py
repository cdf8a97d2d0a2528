"""Compressed-sensing image restoration by Gibbs sampling under a
learned convolutional Gaussian scale-mixture prior."""

__version__ = "0.1.0"
