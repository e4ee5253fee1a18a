"""ridge_adapter: reference external forecaster for the rollcast protocol."""

from .core import AdapterConfig, TaskBundle, fit_node, forecast_bundle, load_bundle, predict_node, run_adapter

__version__ = "0.1.0"
