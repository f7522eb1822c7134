"""Spatio-temporal log-Gaussian Cox process toolkit."""

__version__ = "0.1.0"
