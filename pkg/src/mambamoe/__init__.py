"""Spectral-spatial mixture-of-experts state-space network for HSI classification."""

__version__ = "0.1.0"
