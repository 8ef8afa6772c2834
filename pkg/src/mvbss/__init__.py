"""Multichannel blind source separation with minimum-volume NMF source models."""

__version__ = "0.1.0"
