"""Odd-one-out anomaly detection over multi-view renders of multi-object scenes."""

__version__ = "0.1.0"
