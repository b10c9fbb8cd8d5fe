"""Missingness-aware multimodal alignment and timeline decoding on synthetic cohorts."""

__version__ = "0.1.0"
