"""Smoothed unrolled MRI reconstruction with a numpy autodiff core."""

__version__ = "0.1.0"
