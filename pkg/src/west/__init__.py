"""Weighted stacked GCN-LSTM regional traffic forecasting."""

__version__ = "0.1.0"
