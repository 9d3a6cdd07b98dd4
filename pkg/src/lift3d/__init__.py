"""Lift per-view 2D operator features to view-consistent 3D renders."""

__version__ = "0.1.0"
