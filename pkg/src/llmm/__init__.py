"""Multimodal (clinical text + lab panel) chronic disease risk models built
on a small numpy autodiff core."""

__version__ = "0.1.0"
