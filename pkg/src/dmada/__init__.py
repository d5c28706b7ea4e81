"""Adversarial domain adaptation with pixel- and feature-level domain mixup."""

__version__ = "0.1.0"
