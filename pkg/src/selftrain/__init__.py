"""Self-training for semantic segmentation with centroid sampling, at desk scale."""

__version__ = "0.1.0"
