"""Adversarial examples for deep music content analysis systems."""
__version__ = "0.1.0"
