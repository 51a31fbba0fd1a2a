"""Reference configuration for finite-difference gradient verification.

A deliberately tiny denoiser (T=8, V=12, d=16, 2 blocks) in float64, with
a fixed conditioning sequence and mask draw so the loss closure is
deterministic.  Small enough that checking every coordinate of every
parameter takes seconds, large enough to exercise each op's backward rule
(embeddings, both attention paths, layer norm, GELU MLP, the weighted
cross entropy).
"""

from __future__ import annotations

import numpy as np

from .canvas import MaskDraw, TokenSpace, build_clean_canvas, denoise_loss
from .model import CondSequence, DenoiserConfig, denoiser_forward, init_denoiser
from .nncore import GradCheckReport, grad_check
from .rng import substream

CHECK_CONFIG = DenoiserConfig(canvas_len=8, vocab=12, d_model=16, n_blocks=2,
                              n_heads=2, ff=32, feat_dim=6, max_cond_len=8)


def build_check_problem(seed: int = 0):
    """(params, loss_fn) for the reference check; everything is fixed."""
    rng = substream(seed, "grad-check")
    params = init_denoiser(CHECK_CONFIG, seed, dtype=np.float64)
    space = TokenSpace(CHECK_CONFIG.vocab - 3)
    clean = build_clean_canvas([3, 1, 4, 1, 5], CHECK_CONFIG.canvas_len, space)
    cond = CondSequence(
        features=rng.normal(0.0, 1.0, size=(5, CHECK_CONFIG.feat_dim)).astype(np.float64),
        n_frames=10,
    )
    # mask text, EOS and PAD cells so all roles take gradient
    draw = MaskDraw(t=0.6, positions=np.array([0, 2, 4, 5, 7]))
    noisy = clean.copy()
    noisy.ids[draw.positions] = space.mask_id

    def loss_fn():
        return denoise_loss(denoiser_forward(params, noisy, cond), clean, draw)

    return params, loss_fn


def run_default_grad_check(eps: float = 1e-4, tolerance: float = 1e-3,
                           seed: int = 0) -> GradCheckReport:
    params, loss_fn = build_check_problem(seed)
    return grad_check(loss_fn, params, eps=eps, tolerance=tolerance)
