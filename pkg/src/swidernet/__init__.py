"""Scaled wide residual networks for panoptic segmentation, in pure numpy."""

__version__ = "0.1.0"
