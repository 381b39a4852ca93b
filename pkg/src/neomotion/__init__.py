"""Motion-artifact correction and tissue segmentation for neonatal brain MRI slices."""

__version__ = "0.1.0"
