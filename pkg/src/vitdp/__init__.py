"""Data-parallel training of a small Vision Transformer over a ring AllReduce."""

__version__ = "0.1.0"
