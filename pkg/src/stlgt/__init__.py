"""Span-graph tail-latency forecasting toolkit."""

__version__ = "0.1.0"
