"""Training loops for the denoiser (two stages) and the length predictor.

Per step: draw a batch with replacement, build one masked canvas per
sample, average the per-sample denoising losses, backprop, AdamW with
global-norm clipping under a cosine schedule.  Everything is driven by
explicit seed substreams, so a (seed, config) pair reproduces the loss
curve and the final weights bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .canvas import apply_forward_mask, build_clean_canvas, denoise_loss
from .model import (
    denoiser_config,
    denoiser_forward,
    encode_clip,
    length_logits,
    length_predictor_config,
)
from .nncore import ConfigError, NumericError, adamw_step, cross_entropy, scale
from .rng import substream
from .synthdata import Sample, tokenize, TEXT_SPACE


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, lr: float, batch_ids: list[str]):
        super().__init__(f"non-finite loss at step {step} (lr={lr:.3e}, batch={batch_ids})")
        self.step = step
        self.lr = lr
        self.batch_ids = batch_ids


@dataclass
class TrainConfig:
    stage: int = 1
    steps: int = 3000
    lr: float = 1e-3
    batch_size: int = 16
    seed: int = 0
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    clip_norm: float = 1.0
    min_lr_scale: float = 0.1  # cosine floor as a fraction of lr

    def __post_init__(self):
        if self.steps <= 0:
            raise ConfigError(f"steps must be positive, got {self.steps}")
        if self.lr <= 0.0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size <= 0:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")


def cosine_lr(step: int, total_steps: int, base_lr: float, min_scale: float = 0.1) -> float:
    """base_lr at step 0 decaying to min_scale * base_lr at the last step."""
    if total_steps <= 1:
        return base_lr
    frac = step / (total_steps - 1)
    return base_lr * (min_scale + (1.0 - min_scale) * 0.5 * (1.0 + math.cos(math.pi * frac)))


def _prep_denoiser_batch_cache(samples: list[Sample], canvas_len: int):
    cache = []
    for s in samples:
        cache.append((build_clean_canvas(tokenize(s.text), canvas_len, TEXT_SPACE),
                      encode_clip(s.clip), s.sample_id))
    return cache


def train_stage(params, samples: list[Sample], cfg: TrainConfig,
                log_every: int = 0) -> list[tuple[int, float, float]]:
    """Train one supervision stage in place; returns the (step, lr, loss) curve.

    Stage 2 refines a stage-1 model: starting it from scratch is a config
    error (the meta tracks what the weights have been through).
    """
    trained = int(params.meta.get("trained_stage", "0"))
    if cfg.stage == 2 and trained < 1:
        raise ConfigError("stage 2 requires weights that went through stage 1")
    if not samples:
        raise ConfigError("empty training set")
    mcfg = denoiser_config(params)
    cache = _prep_denoiser_batch_cache(samples, mcfg.canvas_len)
    rng = substream(cfg.seed, "train-stage", cfg.stage)
    curve = []
    for step in range(cfg.steps):
        lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.min_lr_scale)
        idx = rng.integers(0, len(cache), size=cfg.batch_size)
        params.zero_grad()
        try:
            total = None
            for i in idx:
                clean, cond, _ = cache[i]
                noisy, draw = apply_forward_mask(clean, cfg.stage, rng)
                loss_i = denoise_loss(denoiser_forward(params, noisy, cond), clean, draw)
                total = loss_i if total is None else total + loss_i
            loss = scale(total, 1.0 / cfg.batch_size)
        except NumericError:
            raise TrainingDiverged(step, lr, [cache[i][2] for i in idx]) from None
        val = loss.item()
        if not math.isfinite(val):
            raise TrainingDiverged(step, lr, [cache[i][2] for i in idx])
        loss.backward()
        adamw_step(params, lr, cfg.betas, weight_decay=cfg.weight_decay,
                   clip_norm=cfg.clip_norm)
        curve.append((step, lr, val))
        if log_every and step % log_every == 0:
            print(f"stage{cfg.stage} step {step:5d} lr {lr:.2e} loss {val:.4f}")
    params.meta["trained_stage"] = str(max(trained, cfg.stage))
    return curve


def train_length_predictor(params, samples: list[Sample], cfg: TrainConfig,
                           log_every: int = 0) -> list[tuple[int, float, float]]:
    """Cross-entropy over true lengths, dropout active, same optimizer recipe."""
    if not samples:
        raise ConfigError("empty training set")
    mcfg = length_predictor_config(params)
    too_long = [s.sample_id for s in samples if s.k > mcfg.k_max]
    if too_long:
        raise ConfigError(f"{len(too_long)} samples exceed k_max={mcfg.k_max}, "
                          f"first {too_long[0]!r}")
    cache = [(encode_clip(s.clip), s.k, s.sample_id) for s in samples]
    rng = substream(cfg.seed, "train-length")
    drop_rng = substream(cfg.seed, "train-length-dropout")
    curve = []
    for step in range(cfg.steps):
        lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.min_lr_scale)
        idx = rng.integers(0, len(cache), size=cfg.batch_size)
        params.zero_grad()
        try:
            total = None
            for i in idx:
                cond, k, _ = cache[i]
                logits = length_logits(params, cond, train=True, rng=drop_rng)
                loss_i = cross_entropy(logits, np.array([k - 1]), np.array([1.0]))
                total = loss_i if total is None else total + loss_i
            loss = scale(total, 1.0 / cfg.batch_size)
        except NumericError:
            raise TrainingDiverged(step, lr, [cache[i][2] for i in idx]) from None
        val = loss.item()
        if not math.isfinite(val):
            raise TrainingDiverged(step, lr, [cache[i][2] for i in idx])
        loss.backward()
        adamw_step(params, lr, cfg.betas, weight_decay=cfg.weight_decay,
                   clip_norm=cfg.clip_norm)
        curve.append((step, lr, val))
        if log_every and step % log_every == 0:
            print(f"lenpred step {step:5d} lr {lr:.2e} loss {val:.4f}")
    return curve


def write_curve(curve: list[tuple[int, float, float]], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("step,lr,loss\n")
        for step, lr, loss in curve:
            f.write(f"{step},{lr:.8e},{loss:.8e}\n")
