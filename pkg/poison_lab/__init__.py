"""Poison Frog Lab - targeted clean-label poisoning of neural classifiers."""

__version__ = "1.0.0"
