"""Multi-fidelity Bayesian optimization with a deep auto-regressive BNN surrogate."""

__version__ = "0.1.0"
