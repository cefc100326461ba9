"""Softmax Bregman-geometry measurement and steering for toy transformers."""

__version__ = "0.1.0"
