"""Learned resizing front-ends and an efficient training pipeline for large image patches."""

__version__ = "0.1.0"
