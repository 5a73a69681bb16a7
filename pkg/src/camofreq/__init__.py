"""Frequency-domain tools for camouflaged instance segmentation."""
__version__ = "0.1.0"
