"""Multi-station PM2.5 forecasting with DTW peer selection and a CNN-GRU."""

__version__ = "0.1.0"
