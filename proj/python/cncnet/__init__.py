"""Clustering-and-classification training on top of a small C++ core."""

from ._core import (
    Clustering,
    ConfigError,
    Error,
    InputError,
    Model,
    NumericError,
    StageConfig,
    accumulate_affinity,
    cluster,
    compare,
    evaluate,
    gen_planted,
    label_count_ablation,
    load_checkpoint,
    masks,
    relabel,
    run_cnc,
    run_flat,
)

__all__ = [
    "Clustering",
    "ConfigError",
    "Error",
    "InputError",
    "Model",
    "NumericError",
    "StageConfig",
    "accumulate_affinity",
    "cluster",
    "compare",
    "evaluate",
    "gen_planted",
    "label_count_ablation",
    "load_checkpoint",
    "masks",
    "relabel",
    "run_cnc",
    "run_flat",
]
