"""Deformable skip connections and nearest-neighbour loss for pose-guided image generation."""

__version__ = "0.1.0"
