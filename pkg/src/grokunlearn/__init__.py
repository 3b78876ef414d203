"""Grokking and machine unlearning at desk scale.

Submodules: numkernel (autodiff), zoo (models, checkpoints), data, train,
unlearn, metrics, modsim (gradient-correlation Monte Carlo) and harness.
"""

__version__ = "0.1.0"
