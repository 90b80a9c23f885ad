"""Gradient estimation for offline stochastic black-box optimization.

Two estimators learned from a fixed dataset of (theta, x, y) records:
``ETD`` fits a scalar surrogate and differentiates it, ``DGI`` fits the
gradient field directly from line integrals between data pairs.
"""

__version__ = "0.1.0"
