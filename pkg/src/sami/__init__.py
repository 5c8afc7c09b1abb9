"""Masked feature-reconstruction pretraining and promptable segmentation on a numpy autodiff engine."""

__version__ = "0.1.0"
