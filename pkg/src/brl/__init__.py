"""Integral geometry on Riemannian surfaces with boundary: broken-ray transforms,
their regularized inversion and Gaussian beam quasimodes."""

__version__ = "0.1.0"
