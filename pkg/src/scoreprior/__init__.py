"""Single-noise-level score priors for Bayesian image reconstruction."""

__version__ = "0.1.0"
