"""Hindsight credit assignment for stochastic binary networks, with exact
enumeration checks and a contextual-bandit MNIST harness."""

__version__ = "0.1.0"
