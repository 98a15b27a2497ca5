"""Separate a photo lit by two differently coloured lights into one image per light."""

__version__ = "0.1.0"
