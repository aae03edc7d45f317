"""Desk-scale differentiable architecture search over simplifiable supernet graphs."""

__version__ = "0.1.0"
