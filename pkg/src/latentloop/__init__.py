"""Toy pre-norm transformer with PCA-subspace latent feedback.

A desk-scale, fully testable implementation of a latent-token decoder that
reconstructs every generated continuous latent through an empirical PCA
subspace before re-injecting it, plus the surrounding machinery: norm
diagnostics with EMA calibration, difficulty-aware data construction,
joint LM + latent-alignment training with gradient verification, and
intervention / budget-sweep harnesses.
"""

__version__ = "0.1.0"
