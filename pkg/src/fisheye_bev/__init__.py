"""Fisheye pixels to bird's-eye-view rasters via lifted 3-D Gaussians."""

__version__ = "0.1.0"
