"""Desk-scale global-local augmentation, attention invariance and causal prototype losses."""

__version__ = "0.1.0"
