"""Composer: modular networks with a learned, preference-conditioned controller."""

__version__ = "0.1.0"
