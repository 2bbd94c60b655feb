"""Degradation-aware 3D Gaussian splatting for underwater scenes, on the CPU."""

__version__ = "0.1.0"
