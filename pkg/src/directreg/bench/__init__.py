"""Synthetic benchmark data, point-cloud I/O and evaluation metrics."""
