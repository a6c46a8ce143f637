"""Solar flare forecasting with deep state-space models on synthetic solar imagery."""

__version__ = "0.1.0"
