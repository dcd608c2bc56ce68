"""Semi-supervised tumor segmentation with promptable and adaptive pseudo-label refinement."""

__version__ = "0.1.0"
