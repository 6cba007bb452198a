"""Disentangled video-language pretraining at desk scale."""

__version__ = "0.1.0"
