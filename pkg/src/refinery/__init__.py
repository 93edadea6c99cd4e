"""Bayesian-optimization fine-tuning and GMM deployment-time initialization
selection over synthetic success landscapes."""

__version__ = "0.1.0"
