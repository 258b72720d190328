"""Variational and exact Bayesian inference for state space models with stochastic volatility."""

__version__ = "0.1.0"
