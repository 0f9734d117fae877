"""Calibrated adaptive teacher for unsupervised domain adaptation on 1-D signals."""

__version__ = "0.1.0"
