"""Multi-dataset 3D object detection from superpoint queries."""

__version__ = "0.1.0"
