"""Multi-revisit fusion strategies for satellite imagery models."""

from .data import (
    BandSpec,
    DatasetManifest,
    GroundTruth,
    NormalizationMode,
    NormalizationSpec,
    RevisitStack,
    TruthKind,
    fit_normalization,
    geometric_augment,
    load_manifest,
    normalize,
    resize,
    resize_truth,
    select_bands,
)
from .fusion import (
    CANONICAL_STRATEGY_ORDER,
    FusionStrategy,
    expand_augmented,
    median_composite,
    output_fuse,
    select_single,
    temporal_max_fuse,
)
from .metrics import MetricReport, RunResult, aggregate_runs, compute_iou, compute_mse
from .models import ModelConfig, build_model, count_parameters, load_checkpoint, save_checkpoint
from .synthetic import SyntheticParams, generate_dataset, generate_location
from .training import TrainConfig, evaluate, negative_image_report, train

__version__ = "0.1.0"
