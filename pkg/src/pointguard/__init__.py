"""Adversarial-robustness testbed for permutation-invariant point-cloud classifiers."""

__version__ = "0.1.0"
