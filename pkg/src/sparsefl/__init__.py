"""Federated learning with time-varying hierarchical gradient sparsification
and mask-sparsified secure aggregation."""

__version__ = "0.1.0"
