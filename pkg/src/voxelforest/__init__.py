"""Brain tumor segmentation from network score maps and Gabor texton features with a random forest."""

__version__ = "0.1.0"
