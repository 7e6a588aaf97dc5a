"""Synthetic data, optimization, training stages, and the orchestrator."""

from .data import (
    DataSplit,
    DatasetFormatError,
    SyntheticTask,
    Utterance,
    generate_dataset,
    load_dataset,
    save_dataset,
    synthesize_utterance,
)
from .optim import AdamState, TrainConfig, adam_step, tri_stage_lr
from .run import (
    PipelineConfig,
    StageReport,
    config_digest,
    load_stage_report,
    plan_stages,
    run_two_stage,
    save_stage_report,
)
from .stages import (
    MissingArtifactError,
    TrainLog,
    dev_posteriors,
    distill,
    finetune_ctc,
    pretrain_contrastive,
    decode_utterances,
    pseudo_label,
    self_train,
    token_error_rate,
    train_guided_teacher,
)

__all__ = [
    "AdamState",
    "DataSplit",
    "DatasetFormatError",
    "MissingArtifactError",
    "PipelineConfig",
    "StageReport",
    "SyntheticTask",
    "TrainConfig",
    "TrainLog",
    "Utterance",
    "adam_step",
    "config_digest",
    "dev_posteriors",
    "distill",
    "finetune_ctc",
    "generate_dataset",
    "load_dataset",
    "load_stage_report",
    "plan_stages",
    "pretrain_contrastive",
    "decode_utterances",
    "pseudo_label",
    "run_two_stage",
    "save_dataset",
    "save_stage_report",
    "self_train",
    "synthesize_utterance",
    "token_error_rate",
    "train_guided_teacher",
    "tri_stage_lr",
]
