"""Spot capacity probing, availability features and interruption prediction."""

__version__ = "0.1.0"
