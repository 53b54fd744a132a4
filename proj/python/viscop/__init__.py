"""Python bindings for the viscop experiment driver and analysis tools."""

from ._core import (
    ConfigError,
    ContractError,
    DegenerateBatchError,
    DimensionError,
    ExperimentConfig,
    NumericAbort,
    NumericError,
    ablate,
    adapt,
    attention_rollout,
    bhattacharyya,
    delta_metrics,
    export_embeddings,
    fit_bhattacharyya,
    pretrain,
    question_answer,
    render,
    report,
    strategy_names,
)

__all__ = [
    "ConfigError",
    "ContractError",
    "DegenerateBatchError",
    "DimensionError",
    "ExperimentConfig",
    "NumericAbort",
    "NumericError",
    "ablate",
    "adapt",
    "attention_rollout",
    "bhattacharyya",
    "delta_metrics",
    "export_embeddings",
    "fit_bhattacharyya",
    "pretrain",
    "question_answer",
    "render",
    "report",
    "strategy_names",
]
