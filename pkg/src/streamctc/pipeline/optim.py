"""Tri-stage learning-rate schedule and Adam, both deterministic."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import ensure_finite


@dataclass(frozen=True)
class TrainConfig:
    """One stage's optimization settings.

    The schedule warms up linearly from 0 over the first `warmup_frac` of
    updates, holds the peak for `constant_frac`, then decays linearly to 0.
    """

    peak_lr: float
    total_updates: int
    batch_size: int = 4
    seed: int = 0
    warmup_frac: float = 0.1
    constant_frac: float = 0.4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be > 0")
        if self.total_updates < 0:
            raise ValueError("total_updates must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.warmup_frac < 0 or self.constant_frac < 0:
            raise ValueError("schedule fractions must be >= 0")
        if self.warmup_frac + self.constant_frac > 1.0:
            raise ValueError("schedule fractions must sum to <= 1")
        for b in (self.beta1, self.beta2):
            if not 0.0 <= b < 1.0:
                raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")

    def to_dict(self) -> dict:
        return {
            "peak_lr": self.peak_lr,
            "total_updates": self.total_updates,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "warmup_frac": self.warmup_frac,
            "constant_frac": self.constant_frac,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def tri_stage_lr(step, cfg: TrainConfig) -> float:
    """Learning rate at `step` (0..total inclusive)."""
    total = cfg.total_updates
    if step < 0 or step > total:
        raise ValueError(f"step {step} outside 0..{total}")
    if total == 0:
        return 0.0
    warm = cfg.warmup_frac * total
    hold = cfg.constant_frac * total
    if step < warm:
        return cfg.peak_lr * step / warm
    if step <= warm + hold:
        return cfg.peak_lr
    span = total - warm - hold
    if span <= 0:
        return cfg.peak_lr
    return cfg.peak_lr * (total - step) / span


@dataclass
class AdamState:
    """First/second moment accumulators keyed like the parameter dict."""

    m: dict
    v: dict
    t: int = 0

    @classmethod
    def fresh(cls, arrays: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in arrays.items()},
            v={k: np.zeros_like(a) for k, a in arrays.items()},
        )


def adam_step(
    params: dict,
    grads: dict,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """One bias-corrected Adam update; returns (new params dict, new state).

    Gradients must be finite (training fails fast on a bad batch rather
    than silently poisoning the moments).
    """
    if set(params) != set(grads):
        raise ValueError("params and grads must share keys")
    t = state.t + 1
    new_params = {}
    new_m = {}
    new_v = {}
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for key in sorted(params):
        g = np.asarray(grads[key], dtype=np.float64)
        if g.shape != params[key].shape:
            raise ValueError(f"gradient shape mismatch for {key}")
        ensure_finite(g, f"gradient[{key}]")
        m = beta1 * state.m[key] + (1.0 - beta1) * g
        v = beta2 * state.v[key] + (1.0 - beta2) * (g * g)
        new_m[key] = m
        new_v[key] = v
        new_params[key] = params[key] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return new_params, AdamState(m=new_m, v=new_v, t=t)
