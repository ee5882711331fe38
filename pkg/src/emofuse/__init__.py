"""emofuse: three-stage multimodal emotion recognition on precomputed features.

Stage 1 fine-tunes bottleneck adapters over a frozen acoustic layer stack
with a joint classification + masked-reconstruction objective. Stage 2
aligns visual features to the acoustic embedding space with a symmetric
contrastive loss and learnable temperature. Stage 3 fuses acoustic,
lexical, and visual embeddings through modality attention into six emotion
classes. Everything runs on NumPy (optionally numba-accelerated kernels)
with closed-form gradients.
"""

from .adapter import AdapterConfig, AdapterModel, adapter_loss, extract_acoustic, train_adapter_stage
from .align import (
    AlignConfig,
    VisionMLP,
    alignment_loss,
    alignment_stats,
    contrastive_loss,
    train_alignment_stage,
)
from .data import LABEL_NAMES, N_CLASSES, FeatureStore, read_store, write_store
from .errors import (
    ArgumentError,
    CheckpointError,
    ConfigError,
    CorruptionError,
    DataError,
    DimensionError,
    EmofuseError,
    FormatError,
    NumericError,
    OracleError,
)
from .fusion import FusionConfig, FusionModel, attention_fuse, fusion_loss, predict, train_fusion_stage
from .harness import CVConfig, evaluate_split, probe_layers, run_cv, write_run_artifacts
from .metrics import format_mean_std, kfold_split, weighted_f1
from .numcore import AdamState, ParamSet, adam_step, finite_diff_check
from .synth import SyntheticConfig, generate_synthetic

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "AdapterConfig", "AdapterModel", "adapter_loss", "extract_acoustic", "train_adapter_stage",
    "AlignConfig", "VisionMLP", "alignment_loss", "alignment_stats", "contrastive_loss",
    "train_alignment_stage",
    "LABEL_NAMES", "N_CLASSES", "FeatureStore", "read_store", "write_store",
    "EmofuseError", "ArgumentError", "ConfigError", "DimensionError", "DataError",
    "FormatError", "CorruptionError", "CheckpointError", "NumericError", "OracleError",
    "FusionConfig", "FusionModel", "attention_fuse", "fusion_loss", "predict",
    "train_fusion_stage",
    "CVConfig", "evaluate_split", "probe_layers", "run_cv", "write_run_artifacts",
    "format_mean_std", "kfold_split", "weighted_f1",
    "ParamSet", "AdamState", "adam_step", "finite_diff_check",
    "SyntheticConfig", "generate_synthetic",
]
