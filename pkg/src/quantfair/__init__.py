"""Estimate a classifier's demographic disparity with quantification methods."""

__version__ = "0.1.0"
