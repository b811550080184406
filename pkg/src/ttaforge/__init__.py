"""ttaforge: test-time adaptation of a tiny transformer by feature alignment.

The package is self-contained: a minimal reverse-mode autodiff core, a
desk-scale vision transformer, statistics machinery for aligning normalized
feature moments and class centroids, a family of adaptation methods run
through one predict-then-update online loop, and a synthetic corruption
benchmark with a CLI (``ttaforge``).
"""

from .autodiff import Tensor, backward, clip_global_norm, no_grad, sgd_step
from .backbone import (
    ArchConfig,
    VisionTransformer,
    load_model,
    model_features,
    save_model,
    select_modulation_params,
    train_source_model,
)
from .bench import RunConfig, RunReport, aggregate, parse_config, run_experiment, sweep
from .data import (
    Batch,
    CorruptionSpec,
    Dataset,
    GeneratorSpec,
    batches,
    corrupt,
    gen_synthetic_dataset,
    load_dataset,
    save_dataset,
)
from .methods import (
    AdaptConfig,
    AdaptResult,
    T3AState,
    adapt_online,
    cfa_loss,
    class_conditional_loss,
    cmd_loss,
    pl_loss,
    shot_im_loss,
    tent_loss,
    tfa_loss,
    tfa_source_statistics,
)
from .stats import (
    SourceStatistics,
    TargetBatchStatistics,
    batch_statistics,
    load_statistics,
    normalize_features,
    save_statistics,
    source_statistics,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "clip_global_norm",
    "no_grad",
    "sgd_step",
    "ArchConfig",
    "VisionTransformer",
    "load_model",
    "model_features",
    "save_model",
    "select_modulation_params",
    "train_source_model",
    "RunConfig",
    "RunReport",
    "aggregate",
    "parse_config",
    "run_experiment",
    "sweep",
    "Batch",
    "CorruptionSpec",
    "Dataset",
    "GeneratorSpec",
    "batches",
    "corrupt",
    "gen_synthetic_dataset",
    "load_dataset",
    "save_dataset",
    "AdaptConfig",
    "AdaptResult",
    "T3AState",
    "adapt_online",
    "cfa_loss",
    "class_conditional_loss",
    "cmd_loss",
    "pl_loss",
    "shot_im_loss",
    "tent_loss",
    "tfa_loss",
    "tfa_source_statistics",
    "SourceStatistics",
    "TargetBatchStatistics",
    "batch_statistics",
    "load_statistics",
    "normalize_features",
    "save_statistics",
    "source_statistics",
    "__version__",
]
