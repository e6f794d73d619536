"""Randomized subset filtering of tractograms (rSIFT) with a streamline classifier."""

__version__ = "0.1.0"
