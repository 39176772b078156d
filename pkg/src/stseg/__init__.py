"""Segmentation-guided denoising student-teacher anomaly detection."""

__version__ = "0.1.0"
