"""Physically feasible probabilistic trajectory prediction.

A Bayesian-neural-network policy is rolled out recurrently through a known
dynamics model, trained with black-box alpha-divergence minimisation and
adapted online to a single target by particle weighting.
"""

__version__ = "0.1.0"
