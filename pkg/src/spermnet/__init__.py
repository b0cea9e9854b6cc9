"""Sperm motility and morphology regression from video."""

__version__ = "0.1.0"
