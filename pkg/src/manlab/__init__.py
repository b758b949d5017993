"""Adversarial defense by modeling adversarial noise as an instance-dependent label transition."""

__version__ = "0.1.0"
