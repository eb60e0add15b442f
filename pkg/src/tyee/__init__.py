"""Configuration-driven engine for physiological-signal experiments.

One YAML file (plus command-line overrides) defines the whole workflow:
reading multi-channel recordings, offline/online preprocessing pipelines,
windowing into labeled samples with content-addressed caching, training
small verifiable models, and reporting a full metric suite.
"""

from .records import ChannelInfo, EventAnnotation, Record
from .signal_io import (
    detect_format,
    read_record,
    register_format,
    registered_formats,
    unregister_format,
    write_bdf,
    write_edf,
)
from .transforms import (
    Pipeline,
    TransformSpec,
    apply,
    bandpass_filter,
    compile_pipeline,
    crop,
    min_max_normalize,
    notch_filter,
    register_transform,
    resample,
    select_channels,
    zscore_normalize,
)
from .dataset import (
    Dataset,
    EpochSpec,
    Sample,
    SplitSpec,
    build_dataset,
    epoch_record,
    split,
)
from .metrics import (
    ConfusionMatrix,
    MetricReport,
    accuracy,
    aggregate_report,
    auprc,
    auroc,
    balanced_accuracy,
    cohen_kappa,
    f1,
    mae,
    mean_cc,
    scale_mae,
)
from .trainer import (
    Checkpoint,
    Task,
    evaluate_split,
    fit,
    init_task,
    load_checkpoint,
    save_checkpoint,
    train_step,
    valid_step,
)
from .config import (
    ExperimentConfig,
    Override,
    apply_overrides,
    parse_config,
    validate,
)
from . import errors

__version__ = "0.1.0"

__all__ = [
    "ChannelInfo",
    "EventAnnotation",
    "Record",
    "detect_format",
    "read_record",
    "register_format",
    "registered_formats",
    "unregister_format",
    "write_bdf",
    "write_edf",
    "Pipeline",
    "TransformSpec",
    "apply",
    "bandpass_filter",
    "compile_pipeline",
    "crop",
    "min_max_normalize",
    "notch_filter",
    "register_transform",
    "resample",
    "select_channels",
    "zscore_normalize",
    "Dataset",
    "EpochSpec",
    "Sample",
    "SplitSpec",
    "build_dataset",
    "epoch_record",
    "split",
    "ConfusionMatrix",
    "MetricReport",
    "accuracy",
    "aggregate_report",
    "auprc",
    "auroc",
    "balanced_accuracy",
    "cohen_kappa",
    "f1",
    "mae",
    "mean_cc",
    "scale_mae",
    "Checkpoint",
    "Task",
    "evaluate_split",
    "fit",
    "init_task",
    "load_checkpoint",
    "save_checkpoint",
    "train_step",
    "valid_step",
    "ExperimentConfig",
    "Override",
    "apply_overrides",
    "parse_config",
    "validate",
    "errors",
]
