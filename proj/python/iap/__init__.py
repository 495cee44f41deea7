"""Instance-aware prompting for multi-domain task-incremental learning."""

import json

from ._core import (
    ConfigError,
    DistributionLibrary,
    FormatError,
    GaussianStats,
    NumericError,
    RoutingConfig,
    StateError,
    compute_metrics,
    load_checkpoint,
    report,
)
from . import _core


def default_config():
    """The default run config as a nested dict."""
    return json.loads(_core.default_config())


def normalize_config(config):
    """Validates a (partial) config dict and fills in every default."""
    return json.loads(_core.normalize_config(json.dumps(config)))


def run(config=None, out_dir=""):
    """Runs the full task stream and returns its metrics."""
    return _core.run(json.dumps(config or {}), out_dir)


__all__ = [
    "ConfigError",
    "DistributionLibrary",
    "FormatError",
    "GaussianStats",
    "NumericError",
    "RoutingConfig",
    "StateError",
    "compute_metrics",
    "default_config",
    "load_checkpoint",
    "normalize_config",
    "report",
    "run",
]
