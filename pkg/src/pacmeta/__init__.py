"""PAC-Bayesian few-shot meta-learning laboratory."""

__version__ = "0.1.0"
