"""Depth-aware shape convolutions for multi-task IR-D segmentation and depth filling."""

__version__ = "0.1.0"
