"""Python bindings for the sinkdoor backdoored-unlearning lab."""

from ._core import (
    ConfigError,
    Error,
    Experiment,
    IoError,
    Model,
    RunConfig,
    TrainingFault,
    config_keys,
    default_config,
    fnv1a_hex,
    gradcheck_ops,
    load_config,
    parse_config,
    pearson,
    run_gradchecks,
    softmax_row_sum_error,
)

__all__ = [
    "ConfigError",
    "Error",
    "Experiment",
    "IoError",
    "Model",
    "RunConfig",
    "TrainingFault",
    "config_keys",
    "default_config",
    "fnv1a_hex",
    "gradcheck_ops",
    "load_config",
    "parse_config",
    "pearson",
    "run_gradchecks",
    "softmax_row_sum_error",
]
