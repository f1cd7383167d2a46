"""Predictive-information tools for sequence models.

Submodules: ``diffcore`` (autodiff and optimisers), ``bho`` (oscillator
simulator), ``gib`` (Gaussian information bottleneck), ``rnn`` (stochastic
recurrent models), ``miest`` (mutual-information estimators) and
``pipeline`` (datasets, sweeps, classification, plotting).
"""

__version__ = "0.1.0"
