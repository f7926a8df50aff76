"""Cross-domain anomaly detection with adapter-fused encoders and Sinkhorn K-means memory banks."""

__version__ = "0.1.0"
