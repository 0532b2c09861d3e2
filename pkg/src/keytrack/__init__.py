"""Planar keypoint tracking with online multi-task structured learning."""

__version__ = "0.1.0"
