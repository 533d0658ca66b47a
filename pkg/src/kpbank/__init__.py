"""Keypoint detection with contrastive feature banks."""

__version__ = "0.1.0"
