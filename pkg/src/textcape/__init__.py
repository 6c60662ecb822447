"""Text-graph prompted category-agnostic pose estimation."""

__version__ = "0.1.0"
