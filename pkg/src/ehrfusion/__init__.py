"""Multimodal early-detection models over longitudinal EHR labs and codes."""

__version__ = "0.1.0"
