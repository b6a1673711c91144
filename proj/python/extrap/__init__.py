"""Python bindings for the extrap C++ core."""

from ._extrap import (
    ConfigError,
    Generator,
    MetricsError,
    assumption_report,
    build_generator,
    default_config,
    emit_plot,
    entropy,
    influenced_indices,
    mask_sparsity_loss,
    run_matrix,
    sample_source,
    validate_config,
)

__all__ = [
    "ConfigError",
    "Generator",
    "MetricsError",
    "assumption_report",
    "build_generator",
    "default_config",
    "emit_plot",
    "entropy",
    "influenced_indices",
    "mask_sparsity_loss",
    "run_matrix",
    "sample_source",
    "validate_config",
]
