"""GNSS-free vehicle localisation: IMU dead reckoning corrected by triggered cross-view fixes."""

__version__ = "0.1.0"
