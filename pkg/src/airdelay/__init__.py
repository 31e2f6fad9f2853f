"""Spatio-temporal arrival-delay prediction: ingestion, feature engineering,
data fusion, sequence construction, and a from-scratch stacked LSTM regressor
with classical baselines."""

__version__ = "0.1.0"
