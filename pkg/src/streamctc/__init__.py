"""Streaming-transformer CTC speech recognition at desk scale.

A hand-rolled numpy implementation of a small CTC encoder with
switchable streaming attention masks, latency analysis, prefix beam
search with n-gram shallow fusion, and a two-stage fine-tuning recipe:
knowledge distillation from a spike-aligned full-context teacher,
followed by one round of self-training on pseudo-labels.
"""

from .ctc import (
    DecodeConfig,
    Hypothesis,
    UnsatisfiableTargetError,
    ctc_brute_force,
    ctc_loss,
    edit_distance,
    edit_distance_rate,
    greedy_decode,
    prefix_beam_search,
)
from .encoder import (
    EncoderConfig,
    FeatureSequence,
    ForwardTrace,
    ModelParams,
    backward,
    checkpoint_digest,
    forward,
    forward_with_cache,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .lm import (
    FusionLm,
    NgramModel,
    load_lm,
    save_lm,
    train_ngram,
)
from .losses import (
    DistillSpec,
    GuideMask,
    contrastive_loss,
    distillation_loss,
    frame_agreement,
    guide_mask,
    guide_penalty,
    guided_ctc_loss,
)
from .masking import (
    AttentionMask,
    LatencyReport,
    MaskSpec,
    build_mask,
    eil,
    latency_report,
    reception_field,
)
from .pipeline import (
    DataSplit,
    PipelineConfig,
    StageReport,
    SyntheticTask,
    TrainConfig,
    Utterance,
    config_digest,
    distill,
    finetune_ctc,
    generate_dataset,
    load_dataset,
    pseudo_label,
    run_two_stage,
    save_dataset,
    self_train,
    train_guided_teacher,
)
from .vocab import LabelSequence, Vocabulary

__version__ = "0.1.0"

__all__ = [
    "AttentionMask",
    "DataSplit",
    "DecodeConfig",
    "DistillSpec",
    "EncoderConfig",
    "FeatureSequence",
    "ForwardTrace",
    "FusionLm",
    "GuideMask",
    "Hypothesis",
    "LabelSequence",
    "LatencyReport",
    "MaskSpec",
    "ModelParams",
    "NgramModel",
    "PipelineConfig",
    "StageReport",
    "SyntheticTask",
    "TrainConfig",
    "UnsatisfiableTargetError",
    "Utterance",
    "Vocabulary",
    "backward",
    "build_mask",
    "checkpoint_digest",
    "config_digest",
    "contrastive_loss",
    "ctc_brute_force",
    "ctc_loss",
    "distill",
    "distillation_loss",
    "edit_distance",
    "edit_distance_rate",
    "eil",
    "finetune_ctc",
    "forward",
    "forward_with_cache",
    "frame_agreement",
    "generate_dataset",
    "greedy_decode",
    "guide_mask",
    "guide_penalty",
    "guided_ctc_loss",
    "init_params",
    "latency_report",
    "load_checkpoint",
    "load_dataset",
    "load_lm",
    "prefix_beam_search",
    "pseudo_label",
    "reception_field",
    "run_two_stage",
    "save_checkpoint",
    "save_dataset",
    "save_lm",
    "self_train",
    "train_guided_teacher",
    "train_ngram",
    "__version__",
]
