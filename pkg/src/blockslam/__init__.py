"""Block-based neural RGB-D SLAM with adaptive fixed-size SDF submaps."""

__version__ = "0.1.0"
