"""Weakly-supervised video anomaly detection on precomputed snippet features
with grained visual + text fusion and top-k feature-magnitude training."""

__version__ = "0.1.0"
