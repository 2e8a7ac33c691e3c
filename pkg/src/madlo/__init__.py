"""LiDAR odometry built on PCA kd-trees of planar patches."""

__version__ = "0.1.0"
