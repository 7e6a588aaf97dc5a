"""Training stages: CTC fine-tuning, guided teacher, distillation,
pseudo-labeling, self-training, and contrastive pre-training.

All stages share one deterministic update loop: batches are drawn from a
seeded generator, gradients are accumulated in utterance-id order, and
samples whose targets cannot fit their frame count are skipped and
counted. Stage outputs are a trained model plus a log (loss curve,
skip count, dev token error, wall time).
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ..ctc import (
    DecodeConfig,
    UnsatisfiableTargetError,
    ctc_loss,
    edit_distance,
    greedy_decode,
    min_frames,
    prefix_beam_search,
)
from ..encoder import (
    FeatureSequence,
    ModelParams,
    backward,
    checkpoint_digest,
    forward,
    forward_with_cache,
)
from ..lm import FusionLm, NgramModel
from ..losses import (
    DistillSpec,
    contrastive_loss,
    distillation_loss,
    guide_mask,
    guided_ctc_loss,
)
from ..masking import MaskSpec
from ..vocab import Vocabulary
from .optim import AdamState, TrainConfig, adam_step, tri_stage_lr

BIDIRECTIONAL = MaskSpec(variant="bidirectional")


class MissingArtifactError(RuntimeError):
    """An upstream stage's output is required but absent."""


@dataclass
class TrainLog:
    """What a stage did: per-update mean losses, skipped-sample count,
    dev token error (when a dev set was given), and wall time."""

    losses: list
    skipped: int
    dev_token_error: float | None
    wall_time_s: float
    extra: dict = field(default_factory=dict)


def _features(utt) -> FeatureSequence:
    return FeatureSequence(features=utt.features, frame_ms=utt.frame_ms)


def token_error_rate(params: ModelParams, utts, vocabulary: Vocabulary) -> float:
    """Corpus-level token error of greedy decoding under the model's own
    mask: total edit distance over total reference length."""
    spec = params.mask_spec or BIDIRECTIONAL
    edits = 0
    total = 0
    for utt in utts:
        ref = vocabulary.encode(utt.text).tokens
        post = forward(params, _features(utt), spec).posteriorgram
        hyp = greedy_decode(post).tokens
        edits += edit_distance(ref, hyp)
        total += len(ref)
    if total == 0:
        raise ValueError("empty references")
    return edits / total


def dev_posteriors(params: ModelParams, utts) -> list:
    """Posteriorgrams under the model's own mask, in corpus order."""
    spec = params.mask_spec or BIDIRECTIONAL
    return [forward(params, _features(u), spec).posteriorgram for u in utts]


def _check_some_satisfiable(data, vocabulary: Vocabulary) -> None:
    for utt in data:
        target = vocabulary.encode(utt.text)
        if min_frames(target) <= utt.n_frames:
            return
    raise UnsatisfiableTargetError(
        f"all {len(data)} training samples have targets longer than their frames"
    )


def _run_updates(params: ModelParams, data, cfg: TrainConfig, loss_fn):
    """The shared loop. Mutates `params` in place and returns
    (losses per update, skipped count)."""
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.fresh(params.arrays)
    losses = []
    skipped = 0
    n = len(data)
    for step in range(cfg.total_updates):
        lr = tri_stage_lr(step, cfg)
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        batch = sorted((data[int(i)] for i in idx), key=lambda u: u.uid)
        total_grads = None
        loss_sum = 0.0
        ok = 0
        for utt in batch:
            try:
                loss, grads = loss_fn(params, utt)
            except UnsatisfiableTargetError:
                skipped += 1
                continue
            ok += 1
            loss_sum += loss
            if total_grads is None:
                total_grads = grads
            else:
                for key in total_grads:
                    total_grads[key] = total_grads[key] + grads[key]
        if ok == 0:
            losses.append(math.nan)
            continue
        mean_grads = {k: g / ok for k, g in total_grads.items()}
        params.arrays, state = adam_step(
            params.arrays,
            mean_grads,
            state,
            lr,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            eps=cfg.eps,
        )
        losses.append(loss_sum / ok)
    return losses, skipped


def _ctc_loss_fn(vocabulary: Vocabulary, spec: MaskSpec):
    def fn(params: ModelParams, utt):
        target = vocabulary.encode(utt.text)
        trace, cache = forward_with_cache(params, _features(utt), spec, train=True)
        loss, d_logpost = ctc_loss(trace.posteriorgram, target)
        grads, _ = backward(params, cache, grad_logpost=d_logpost)
        return loss, grads

    return fn


def finetune_ctc(
    init: ModelParams,
    spec: MaskSpec,
    data,
    cfg: TrainConfig,
    dev=(),
    vocabulary: Vocabulary | None = None,
):
    """CTC fine-tuning under an attention mask. Returns (model, log);
    with 0 updates the returned model equals `init` (mask spec aside)."""
    vocabulary = vocabulary or Vocabulary.default()
    data = list(data)
    if not data:
        raise ValueError("training set is empty")
    _check_some_satisfiable(data, vocabulary)
    started = time.perf_counter()
    work = init.copy()
    work.mask_spec = spec
    losses, skipped = _run_updates(work, data, cfg, _ctc_loss_fn(vocabulary, spec))
    dev_ter = token_error_rate(work, dev, vocabulary) if dev else None
    log = TrainLog(
        losses=losses,
        skipped=skipped,
        dev_token_error=dev_ter,
        wall_time_s=time.perf_counter() - started,
    )
    return work, log


def train_guided_teacher(
    pretrained: ModelParams,
    streaming: ModelParams,
    data,
    alpha: float,
    cfg: TrainConfig,
    dev=(),
    vocabulary: Vocabulary | None = None,
):
    """Train a full-context model whose posteriors are pulled toward the
    frozen streaming model's per-frame spikes. With alpha 0 the run is
    bit-identical to plain CTC fine-tuning."""
    vocabulary = vocabulary or Vocabulary.default()
    data = list(data)
    if not data:
        raise ValueError("training set is empty")
    if streaming.mask_spec is None:
        raise ValueError("guide model does not record a streaming mask spec")
    _check_some_satisfiable(data, vocabulary)
    started = time.perf_counter()
    masks = {
        utt.uid: guide_mask(
            forward(streaming, _features(utt), streaming.mask_spec).posteriorgram
        )
        for utt in data
    }
    work = pretrained.copy()
    work.mask_spec = BIDIRECTIONAL

    def fn(params: ModelParams, utt):
        target = vocabulary.encode(utt.text)
        trace, cache = forward_with_cache(
            params, _features(utt), BIDIRECTIONAL, train=True
        )
        loss, d_logpost = guided_ctc_loss(
            trace.posteriorgram, target, masks[utt.uid], alpha
        )
        grads, _ = backward(params, cache, grad_logpost=d_logpost)
        return loss, grads

    losses, skipped = _run_updates(work, data, cfg, fn)
    dev_ter = token_error_rate(work, dev, vocabulary) if dev else None
    log = TrainLog(
        losses=losses,
        skipped=skipped,
        dev_token_error=dev_ter,
        wall_time_s=time.perf_counter() - started,
        extra={"alpha": alpha},
    )
    return work, log


def distill(
    pretrained: ModelParams,
    teacher: ModelParams,
    spec: MaskSpec,
    data,
    distill_spec: DistillSpec,
    cfg: TrainConfig,
    head_source: ModelParams | None = None,
    dev=(),
    vocabulary: Vocabulary | None = None,
):
    """Train a streaming student to match the teacher's hidden states.

    Labels are never read, so unlabeled utterances are fine. The output
    head is copied from `head_source` (the streaming CTC model) when
    given, making the student decodable without CTC training.
    """
    vocabulary = vocabulary or Vocabulary.default()
    data = list(data)
    if not data:
        raise ValueError("training set is empty")
    started = time.perf_counter()
    work = pretrained.copy()
    work.mask_spec = spec
    if head_source is not None:
        work.arrays["head.w"] = head_source.arrays["head.w"].copy()
        work.arrays["head.b"] = head_source.arrays["head.b"].copy()
    teacher_spec = teacher.mask_spec or BIDIRECTIONAL
    teacher_digest = checkpoint_digest(teacher)
    trace_cache = {}

    def teacher_trace(utt):
        key = (teacher_digest, utt.uid)
        if key not in trace_cache:
            trace_cache[key] = forward(teacher, _features(utt), teacher_spec)
        return trace_cache[key]

    def fn(params: ModelParams, utt):
        trace, cache = forward_with_cache(params, _features(utt), spec, train=True)
        loss, grad_hidden = distillation_loss(trace, teacher_trace(utt), distill_spec)
        grads, _ = backward(params, cache, grad_hidden=grad_hidden)
        return loss, grads

    def dev_distill_loss(model: ModelParams) -> float:
        values = [
            distillation_loss(
                forward(model, _features(u), spec), teacher_trace(u), distill_spec
            )[0]
            for u in dev
        ]
        return float(np.mean(values))

    first = dev_distill_loss(work) if dev else None
    losses, skipped = _run_updates(work, data, cfg, fn)
    last = dev_distill_loss(work) if dev else None
    dev_ter = token_error_rate(work, dev, vocabulary) if dev else None
    log = TrainLog(
        losses=losses,
        skipped=skipped,
        dev_token_error=dev_ter,
        wall_time_s=time.perf_counter() - started,
        extra={
            "distill_layers": list(distill_spec.layer_indices),
            "head_from": "streaming" if head_source is not None else "init",
            "dev_distill_first": first,
            "dev_distill_last": last,
        },
    )
    return work, log


def _top_hypothesis(job):
    model, cfg, spec, utt = job
    post = forward(model, _features(utt), spec).posteriorgram
    return prefix_beam_search(post, cfg)[0]


def decode_utterances(
    model: ModelParams,
    data,
    decode_cfg: DecodeConfig,
    jobs: int = 1,
):
    """Top beam hypothesis per utterance, in input order. `jobs` > 1
    decodes utterances in worker processes; the result is identical
    because each decode is a pure function and results are collected
    in input order."""
    if jobs < 1:
        raise ValueError("jobs must be >= 1")
    data = list(data)
    spec = model.mask_spec or BIDIRECTIONAL
    work = [(model, decode_cfg, spec, utt) for utt in data]
    if jobs == 1 or len(data) < 2:
        return [_top_hypothesis(j) for j in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        chunk = max(1, len(work) // (2 * jobs))
        return list(pool.map(_top_hypothesis, work, chunksize=chunk))


def pseudo_label(
    model: ModelParams,
    lm: NgramModel | None,
    data,
    decode_cfg: DecodeConfig,
    vocabulary: Vocabulary | None = None,
    jobs: int = 1,
):
    """Beam-decode unlabeled utterances into labels. Returns (labeled
    utterances, dropped count); empty top hypotheses are dropped."""
    vocabulary = vocabulary or Vocabulary.default()
    cfg = decode_cfg
    if lm is not None and cfg.lm is None:
        cfg = replace(cfg, lm=FusionLm(lm, vocabulary))
    data = list(data)
    kept = []
    dropped = 0
    for utt, top in zip(data, decode_utterances(model, data, cfg, jobs=jobs)):
        if not top.labels.tokens:
            dropped += 1
            continue
        kept.append(replace(utt, text=vocabulary.decode(top.labels)))
    return tuple(kept), dropped


def self_train(
    kd: ModelParams,
    data,
    cfg: TrainConfig,
    dev=(),
    vocabulary: Vocabulary | None = None,
):
    """One round of CTC training on labeled plus pseudo-labeled data,
    under the student's own streaming mask."""
    if kd.mask_spec is None:
        raise ValueError("self-training input must record its mask spec")
    return finetune_ctc(kd, kd.mask_spec, data, cfg, dev=dev, vocabulary=vocabulary)


def pretrain_contrastive(
    init: ModelParams,
    data,
    cfg: TrainConfig,
    n_masked: int = 2,
    n_distractors: int = 5,
    temperature: float = 1.0,
):
    """Brief self-supervised warm-up: final-layer states at sampled
    positions are pushed toward their own (constant) frontend outputs and
    away from other frames'. Always runs with the full-context mask."""
    data = list(data)
    if not data:
        raise ValueError("training set is empty")
    started = time.perf_counter()
    work = init.copy()
    work.mask_spec = None
    position_rng = np.random.default_rng(cfg.seed)
    top_layer = init.config.n_layers

    def fn(params: ModelParams, utt):
        trace, cache = forward_with_cache(
            params, _features(utt), BIDIRECTIONAL, train=True
        )
        context = trace.hidden[-1]
        targets = cache["h0"]
        t_len = context.shape[0]
        if t_len < 2:
            raise UnsatisfiableTargetError("too few frames for contrastive pairs")
        n_pos = min(n_masked, t_len)
        k = min(n_distractors, t_len - 1)
        positions = position_rng.choice(t_len, size=n_pos, replace=False)
        grad = np.zeros_like(context)
        loss_total = 0.0
        for pos in sorted(int(p) for p in positions):
            others = np.delete(np.arange(t_len), pos)
            picked = position_rng.choice(others, size=k, replace=False)
            loss, g_context = contrastive_loss(
                context[pos],
                targets[pos],
                [targets[int(j)] for j in picked],
                temperature,
            )
            loss_total += loss / n_pos
            grad[pos] += g_context / n_pos
        grads, _ = backward(params, cache, grad_hidden={top_layer: grad})
        return loss_total, grads

    losses, skipped = _run_updates(work, data, cfg, fn)
    log = TrainLog(
        losses=losses,
        skipped=skipped,
        dev_token_error=None,
        wall_time_s=time.perf_counter() - started,
        extra={
            "mode": "contrastive",
            "n_masked": n_masked,
            "n_distractors": n_distractors,
            "temperature": temperature,
        },
    )
    return work, log
