"""Video-based localization toolkit: map building, tracking and pose estimation."""

__version__ = "0.1.0"
