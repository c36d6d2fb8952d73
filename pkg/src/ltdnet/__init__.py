"""Joint object detection and semantic segmentation with local top-down fusion."""

__version__ = "0.1.0"
