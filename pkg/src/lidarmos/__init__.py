"""LiDAR moving-object segmentation: range-image network with motion-guided attention and a point refinement head."""

__version__ = "0.1.0"
