"""Whole time-series clustering for electricity load profiles.

Two-stage pipeline (convolutional autoencoder features + K-medoids) with
raw / PCA / Haar-wavelet / DTW baselines, Local Outlier Factor scoring,
and a seeded synthetic consumption benchmark.
"""

__version__ = "0.1.0"
