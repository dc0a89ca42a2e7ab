"""Motion-energy figure-ground segmentation toolkit."""

__version__ = "0.1.0"
