"""Streaming ICU acuity scoring: SOFA baselines, a GRU + causal attention
mortality model, and the hourly evaluation protocol."""

__version__ = "0.1.0"
