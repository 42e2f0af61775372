"""Command-line interface and HTTP/WebSocket service around the toolkit."""

from cvfields.clisvc.config import ConfigError, EvalJob, FitJob, ServeJob, SimulateJob
from cvfields.clisvc.model_io import ModelSchemaError, load_model, save_model
from cvfields.clisvc.service import create_app

__all__ = [
    "ConfigError",
    "EvalJob",
    "FitJob",
    "ServeJob",
    "SimulateJob",
    "ModelSchemaError",
    "load_model",
    "save_model",
    "create_app",
]
