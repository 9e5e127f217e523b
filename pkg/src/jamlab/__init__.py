"""Desk-scale laboratory for compound GNSS jamming classification.

Synthesizes calibrated compound interference, extracts dual-domain
features (log-STFT image + Welch PSD image), and trains a from-scratch
dual-stream selective-kernel classifier with verifiable numerics.
"""

__version__ = "0.1.0"
