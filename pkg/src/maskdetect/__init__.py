"""Detecting adversarial examples against a toy speaker verifier with
time-frequency masks."""

__version__ = "0.1.0"
