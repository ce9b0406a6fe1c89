"""Toolkit for detecting regional spurious correlations in patch-token
transformer classifiers via token discarding and TSI scoring."""

__version__ = "0.1.0"
