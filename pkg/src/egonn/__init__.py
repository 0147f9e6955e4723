"""EgoNN-style LiDAR relocalization: global retrieval plus keypoint-based 6DoF registration."""

__version__ = "0.1.0"
