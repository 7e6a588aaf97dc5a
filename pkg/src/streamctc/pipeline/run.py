"""Two-stage pipeline orchestration.

Runs the six stages in dependency order with checkpoint handoff:

  S   streaming CTC model fine-tuned on labeled data
  T   full-context teacher trained with the guided loss against S
  KD  streaming student distilled from T's hidden states (head from S)
  N   full-context CTC model for labeling
  U'  pseudo-labels for the unlabeled set, decoded with N and the LM
  ST  self-trained student: KD fine-tuned on labeled + pseudo-labeled

Every artifact (datasets, LM, checkpoints, reports) lands under one
output directory. Resuming deletes nothing: the earliest missing
artifact in the chain determines where recomputation starts, and all
later stages re-run (training is deterministic, so recomputed artifacts
are bit-identical to what a fresh run would produce).
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field

from ..ctc import DecodeConfig, edit_distance
from ..encoder import (
    EncoderConfig,
    ModelParams,
    checkpoint_digest,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from ..lm import load_lm, save_lm, train_ngram
from ..losses import DistillSpec
from ..masking import MaskSpec
from ..vocab import DELIMITER, Vocabulary
from .data import SyntheticTask, generate_dataset, load_dataset, save_dataset
from .optim import TrainConfig
from .stages import (
    MissingArtifactError,
    TrainLog,
    distill,
    finetune_ctc,
    pretrain_contrastive,
    pseudo_label,
    self_train,
    train_guided_teacher,
)

STAGE_ORDER = ("S", "T", "KD", "N", "U'", "ST")
TABLE_ALIASES = {"S": "S4", "T": "T4", "KD": "S5", "N": "N1", "ST": "S7"}
STAGE_SEED_OFFSET = {"pretrain": 1, "S": 2, "T": 3, "KD": 4, "N": 5, "ST": 6}


def _stage_key(stage: str) -> str:
    return "U" if stage == "U'" else stage


@dataclass
class StageReport:
    """One stage's outcome, written as JSON plus a CSV loss curve."""

    stage: str
    alias: str | None
    checkpoint: str
    digest: str
    losses: list
    dev_token_error: float | None
    decode_config: dict | None
    train_config: dict | None
    wall_time_s: float
    utterances_in: int
    skipped: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("losses")
        return d


def save_stage_report(report: StageReport, reports_dir) -> str:
    """Write {stage}.json and loss_{stage}.csv; returns the JSON path."""
    if not os.path.exists(report.checkpoint):
        raise MissingArtifactError(
            f"stage {report.stage}: report references missing checkpoint "
            f"{report.checkpoint}"
        )
    os.makedirs(reports_dir, exist_ok=True)
    key = _stage_key(report.stage)
    csv_path = os.path.join(reports_dir, f"loss_{key}.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step, loss in enumerate(report.losses):
            writer.writerow([step, f"{loss:.17g}"])
    payload = report.to_dict()
    payload["loss_curve"] = os.path.basename(csv_path)
    json_path = os.path.join(reports_dir, f"{key}.json")
    with open(json_path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return json_path


def load_stage_report(reports_dir, stage: str) -> StageReport:
    key = _stage_key(stage)
    json_path = os.path.join(reports_dir, f"{key}.json")
    with open(json_path) as fh:
        payload = json.load(fh)
    csv_path = os.path.join(reports_dir, payload.pop("loss_curve"))
    losses = []
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            losses.append(float(row["loss"]))
    payload["losses"] = losses
    return StageReport(**payload)


@dataclass
class PipelineConfig:
    """Everything a full run needs; serializable for provenance."""

    out_dir: str
    seed: int = 0
    # synthetic task
    n_symbols: int = 3
    use_delimiter: bool = True
    frames_per_token: tuple = (2, 4)
    noise_std: float = 0.4
    text_len: tuple = (2, 6)
    template_scale: float = 1.0
    sizes: tuple = (24, 24, 16)
    # models
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    stream: MaskSpec = field(
        default_factory=lambda: MaskSpec(
            variant="block", chunk_frames=12, future_frames=18
        )
    )
    alpha: float = 0.01
    distill_layers: tuple | None = None
    # language model
    lm_order: int = 3
    lm_smoothing: float = 0.2
    # decoding (pseudo-labeling)
    beam_size: int = 8
    lm_weight: float = 2.15
    word_insertion_penalty: float = -0.52
    # optimization
    peak_lr: float = 2e-3
    batch_size: int = 4
    updates: dict = field(
        default_factory=lambda: {
            "pretrain": 0,
            "S": 800,
            "T": 800,
            "KD": 400,
            "N": 800,
            "ST": 800,
        }
    )
    pretrain_mode: str = "random"
    resume: bool = True

    def __post_init__(self):
        if self.pretrain_mode not in ("random", "contrastive"):
            raise ValueError("pretrain_mode must be 'random' or 'contrastive'")
        missing = [s for s in ("S", "T", "KD", "N", "ST") if s not in self.updates]
        if missing:
            raise ValueError(f"updates missing stages: {missing}")
        if self.n_symbols < 1 or self.n_symbols > 26:
            raise ValueError("n_symbols must be in 1..26")

    def token_ids(self, vocabulary: Vocabulary) -> list:
        first_letter = vocabulary.symbols.index("a")
        ids = [first_letter + i for i in range(self.n_symbols)]
        if self.use_delimiter:
            ids.append(DELIMITER)
        return ids

    def task(self, vocabulary: Vocabulary) -> SyntheticTask:
        return SyntheticTask.make(
            token_ids=self.token_ids(vocabulary),
            feature_dim=self.encoder.feature_dim,
            frames_per_token=self.frames_per_token,
            noise_std=self.noise_std,
            seed=self.seed,
            text_len=self.text_len,
            template_scale=self.template_scale,
        )

    def train_config(self, stage: str) -> TrainConfig:
        return TrainConfig(
            peak_lr=self.peak_lr,
            total_updates=int(self.updates[stage]),
            batch_size=self.batch_size,
            seed=self.seed + STAGE_SEED_OFFSET[stage],
        )

    def decode_config(self) -> DecodeConfig:
        return DecodeConfig(
            beam_size=self.beam_size,
            lm_weight=self.lm_weight,
            word_insertion_penalty=self.word_insertion_penalty,
        )

    def distill_spec(self) -> DistillSpec:
        if self.distill_layers is not None:
            return DistillSpec(layer_indices=tuple(self.distill_layers))
        return DistillSpec.thirds(self.encoder.n_layers)

    def to_dict(self) -> dict:
        return {
            "out_dir": self.out_dir,
            "seed": self.seed,
            "n_symbols": self.n_symbols,
            "use_delimiter": self.use_delimiter,
            "frames_per_token": list(self.frames_per_token),
            "noise_std": self.noise_std,
            "text_len": list(self.text_len),
            "template_scale": self.template_scale,
            "sizes": list(self.sizes),
            "encoder": self.encoder.to_dict(),
            "stream": self.stream.to_dict(),
            "alpha": self.alpha,
            "distill_layers": (
                list(self.distill_layers) if self.distill_layers else None
            ),
            "lm_order": self.lm_order,
            "lm_smoothing": self.lm_smoothing,
            "beam_size": self.beam_size,
            "lm_weight": self.lm_weight,
            "word_insertion_penalty": self.word_insertion_penalty,
            "peak_lr": self.peak_lr,
            "batch_size": self.batch_size,
            "updates": dict(self.updates),
            "pretrain_mode": self.pretrain_mode,
            "resume": self.resume,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        if "encoder" in d:
            d["encoder"] = EncoderConfig.from_dict(d["encoder"])
        if "stream" in d:
            d["stream"] = MaskSpec.from_dict(d["stream"])
        for key in ("frames_per_token", "text_len", "sizes", "distill_layers"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


def config_digest(config: PipelineConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _artifact_paths(out: str) -> list:
    ck = os.path.join(out, "checkpoints")
    da = os.path.join(out, "data")
    rp = os.path.join(out, "reports")

    def stage_files(key: str) -> list:
        return [
            os.path.join(ck, f"{key}.ckpt"),
            os.path.join(rp, f"{key}.json"),
            os.path.join(rp, f"loss_{key}.csv"),
        ]

    return [
        ("data", [os.path.join(da, f"{s}.bin") for s in ("labeled", "unlabeled", "dev")]),
        ("lm", [os.path.join(out, "lm.txt")]),
        ("P", [os.path.join(ck, "P.ckpt")]),
        ("S", stage_files("S")),
        ("T", stage_files("T")),
        ("KD", stage_files("KD")),
        ("N", stage_files("N")),
        (
            "U'",
            [
                os.path.join(da, "pseudo.bin"),
                os.path.join(rp, "U.json"),
                os.path.join(rp, "loss_U.csv"),
            ],
        ),
        ("ST", stage_files("ST")),
    ]


def plan_stages(config: PipelineConfig) -> list:
    """The dry-run listing: six stages, dependencies, and settings."""
    decode = config.decode_config().to_dict()
    plan = []
    for stage, depends, updates, note in (
        ("S", ["P", "data"], config.updates["S"], "streaming CTC on labeled set"),
        ("T", ["P", "S"], config.updates["T"], f"guided teacher, alpha={config.alpha}"),
        (
            "KD",
            ["P", "T", "S"],
            config.updates["KD"],
            f"distillation, layers {list(config.distill_spec().layer_indices)}",
        ),
        ("N", ["P", "data"], config.updates["N"], "full-context CTC on labeled set"),
        ("U'", ["N", "lm"], 0, "pseudo-labeling of the unlabeled set"),
        ("ST", ["KD", "U'"], config.updates["ST"], "self-training on labeled + pseudo"),
    ):
        entry = {
            "stage": stage,
            "alias": TABLE_ALIASES.get(stage),
            "depends_on": depends,
            "updates": updates,
            "note": note,
        }
        if stage == "U'":
            entry["decode"] = decode
        plan.append(entry)
    return plan


def _build_report(
    stage: str,
    checkpoint_path: str,
    digest: str,
    log: TrainLog,
    utterances_in: int,
    train_config: TrainConfig | None,
    decode_config: dict | None = None,
) -> StageReport:
    return StageReport(
        stage=stage,
        alias=TABLE_ALIASES.get(stage),
        checkpoint=checkpoint_path,
        digest=digest,
        losses=log.losses,
        dev_token_error=log.dev_token_error,
        decode_config=decode_config,
        train_config=train_config.to_dict() if train_config else None,
        wall_time_s=log.wall_time_s,
        utterances_in=utterances_in,
        skipped=log.skipped,
        extra=log.extra,
    )


def run_two_stage(config: PipelineConfig, dry_run: bool = False, jobs: int = 1):
    """Execute (or, with `dry_run`, just plan) the full six-stage recipe.

    Returns the ordered stage reports for S, T, KD, N, U', ST, reusing
    on-disk artifacts up to the earliest missing one when `resume` is set.
    `jobs` parallelizes pseudo-label decoding without changing results.
    """
    if dry_run:
        return plan_stages(config)

    out = config.out_dir
    ck_dir = os.path.join(out, "checkpoints")
    da_dir = os.path.join(out, "data")
    rp_dir = os.path.join(out, "reports")
    for d in (ck_dir, da_dir, rp_dir):
        os.makedirs(d, exist_ok=True)

    artifacts = _artifact_paths(out)
    start = len(artifacts)
    for i, (_, paths) in enumerate(artifacts):
        if not all(os.path.exists(p) for p in paths):
            start = i
            break
    if not config.resume:
        start = 0
    fresh = {name: i >= start for i, (name, _) in enumerate(artifacts)}

    vocabulary = Vocabulary.default()
    started = time.perf_counter()
    reports = {}

    # data
    labeled_p, unlabeled_p, dev_p = dict(artifacts)["data"]
    if fresh["data"]:
        split = generate_dataset(config.task(vocabulary), config.sizes, vocabulary)
        save_dataset(split.labeled, labeled_p)
        save_dataset(split.unlabeled, unlabeled_p)
        save_dataset(split.dev, dev_p)
        labeled, unlabeled, dev = split.labeled, split.unlabeled, split.dev
    else:
        labeled = load_dataset(labeled_p)
        unlabeled = load_dataset(unlabeled_p)
        dev = load_dataset(dev_p)

    # language model on the labeled transcripts
    lm_path = dict(artifacts)["lm"][0]
    if fresh["lm"]:
        lm_model = train_ngram(
            [u.text for u in labeled], config.lm_order, config.lm_smoothing
        )
        save_lm(lm_model, lm_path)
    else:
        lm_model = load_lm(lm_path)

    # pre-trained starting point P
    p_path = dict(artifacts)["P"][0]
    pretrain_updates = int(config.updates.get("pretrain", 0))
    if fresh["P"]:
        p_params = init_params(config.encoder, config.seed)
        if config.pretrain_mode == "contrastive" and pretrain_updates > 0:
            p_params, _ = pretrain_contrastive(
                p_params,
                unlabeled,
                TrainConfig(
                    peak_lr=config.peak_lr,
                    total_updates=pretrain_updates,
                    batch_size=config.batch_size,
                    seed=config.seed + STAGE_SEED_OFFSET["pretrain"],
                ),
            )
        save_checkpoint(p_params, p_path)
    else:
        p_params = load_checkpoint(p_path, expect_config=config.encoder)

    def run_stage(stage: str, producer) -> ModelParams | tuple:
        key = _stage_key(stage)
        if fresh[stage]:
            params, report = producer()
            save_stage_report(report, rp_dir)
        else:
            report = load_stage_report(rp_dir, stage)
            params = load_checkpoint(
                os.path.join(ck_dir, f"{key}.ckpt"), expect_config=config.encoder
            )
        reports[stage] = report
        return params

    def trained(stage: str, params: ModelParams, log: TrainLog, n_in: int,
                cfg: TrainConfig, decode: dict | None = None):
        path = os.path.join(ck_dir, f"{_stage_key(stage)}.ckpt")
        digest = save_checkpoint(params, path)
        return params, _build_report(stage, path, digest, log, n_in, cfg, decode)

    cfg_s = config.train_config("S")
    s_params = run_stage(
        "S",
        lambda: trained(
            "S",
            *finetune_ctc(p_params, config.stream, labeled, cfg_s, dev, vocabulary),
            len(labeled),
            cfg_s,
        ),
    )

    cfg_t = config.train_config("T")
    t_params = run_stage(
        "T",
        lambda: trained(
            "T",
            *train_guided_teacher(
                p_params, s_params, labeled, config.alpha, cfg_t, dev, vocabulary
            ),
            len(labeled),
            cfg_t,
        ),
    )

    cfg_kd = config.train_config("KD")
    kd_data = list(labeled) + list(unlabeled)
    kd_params = run_stage(
        "KD",
        lambda: trained(
            "KD",
            *distill(
                p_params,
                t_params,
                config.stream,
                kd_data,
                config.distill_spec(),
                cfg_kd,
                head_source=s_params,
                dev=dev,
                vocabulary=vocabulary,
            ),
            len(kd_data),
            cfg_kd,
        ),
    )

    cfg_n = config.train_config("N")
    bidi = MaskSpec(variant="bidirectional")
    n_params = run_stage(
        "N",
        lambda: trained(
            "N",
            *finetune_ctc(p_params, bidi, labeled, cfg_n, dev, vocabulary),
            len(labeled),
            cfg_n,
        ),
    )

    # pseudo-labels
    pseudo_p = dict(artifacts)["U'"][0]
    decode_cfg = config.decode_config()
    if fresh["U'"]:
        t_started = time.perf_counter()
        pseudo, dropped = pseudo_label(
            n_params, lm_model, unlabeled, decode_cfg, vocabulary, jobs=jobs
        )
        hidden_refs = {u.uid: u.text for u in unlabeled}
        edits = 0
        total = 0
        for u in pseudo:
            ref = vocabulary.encode(hidden_refs[u.uid]).tokens
            edits += edit_distance(ref, vocabulary.encode(u.text).tokens)
            total += len(ref)
        reference_error = edits / total if total else None
        save_dataset(pseudo, pseudo_p)
        log = TrainLog(
            losses=[],
            skipped=0,
            dev_token_error=None,
            wall_time_s=time.perf_counter() - t_started,
            extra={
                "dropped": dropped,
                "pseudo_labeled": len(pseudo),
                "hidden_reference_error": reference_error,
            },
        )
        report = _build_report(
            "U'",
            os.path.join(ck_dir, "N.ckpt"),
            checkpoint_digest(n_params),
            log,
            len(unlabeled),
            None,
            decode_cfg.to_dict(),
        )
        save_stage_report(report, rp_dir)
    else:
        pseudo = load_dataset(pseudo_p)
        report = load_stage_report(rp_dir, "U'")
    reports["U'"] = report

    cfg_st = config.train_config("ST")
    st_data = list(labeled) + list(pseudo)
    run_stage(
        "ST",
        lambda: trained(
            "ST",
            *self_train(kd_params, st_data, cfg_st, dev, vocabulary),
            len(st_data),
            cfg_st,
        ),
    )

    dropped = reports["U'"].extra.get("dropped", 0)
    summary = {
        "config": config.to_dict(),
        "config_digest": config_digest(config),
        "aliases": TABLE_ALIASES,
        "pretrain_mode": config.pretrain_mode,
        "pretrain_updates": pretrain_updates,
        "stage_digests": {s: reports[s].digest for s in STAGE_ORDER},
        "dev_token_error": {
            s: reports[s].dev_token_error for s in STAGE_ORDER
        },
        "conservation": {
            "labeled": len(labeled),
            "unlabeled": len(unlabeled),
            "dev": len(dev),
            "kd_consumed": reports["KD"].utterances_in,
            "pseudo_labeled": len(pseudo),
            "pseudo_dropped": dropped,
            "st_consumed": reports["ST"].utterances_in,
        },
        "total_updates": sum(len(reports[s].losses) for s in STAGE_ORDER),
        "wall_time_s": time.perf_counter() - started,
    }
    with open(os.path.join(rp_dir, "pipeline.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return [reports[s] for s in STAGE_ORDER]
