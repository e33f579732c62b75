"""Adversarial segmentation and disease classification with selective class weighting."""

__version__ = "0.1.0"
