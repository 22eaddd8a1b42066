"""Gaussian loss-weighted resampling for time series forecasting."""

__version__ = "0.1.0"
