"""DSNet-fast / DSNet-accurate road-scene segmentation on a NumPy engine."""

__version__ = "0.1.0"
