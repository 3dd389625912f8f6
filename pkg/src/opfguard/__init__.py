"""Worst-case guarantees for neural networks that predict DC optimal power flow."""

__version__ = "0.1.0"
