"""Python bindings for the frozen-foundation detector toolkit."""

from ._core import (
    Box,
    ContractError,
    Detection,
    EvalReport,
    GroundTruth,
    IoError,
    RunConfig,
    box_iou,
    compute_ap,
    error_analysis,
    gen,
    hungarian_match,
    load_config,
    pretrain,
    train,
    evaluate,
)

__all__ = [
    "Box",
    "ContractError",
    "Detection",
    "EvalReport",
    "GroundTruth",
    "IoError",
    "RunConfig",
    "box_iou",
    "compute_ap",
    "error_analysis",
    "gen",
    "hungarian_match",
    "load_config",
    "pretrain",
    "train",
    "evaluate",
]
