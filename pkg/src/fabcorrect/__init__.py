"""Segmentation, fabrication-variation prediction and tandem layout correction."""

__version__ = "0.1.0"
