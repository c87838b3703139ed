"""Decoupled transformer reader for open-domain extractive QA."""

__version__ = "0.1.0"
