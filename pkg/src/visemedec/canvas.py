"""Fixed-length token canvas and the masked-denoising objective.

A clean canvas holds a K-token transcript followed by one EOS and PAD out
to length T.  The forward process masks a Bernoulli(t) subset of the
supervised positions; the loss reweights masked-position cross entropy by
1/t so the objective stays an unbiased bound as t varies.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .nncore import Tensor, cross_entropy


class LengthError(ValueError):
    pass


class VocabError(ValueError):
    pass


class Role(enum.Enum):
    TEXT = "text"
    EOS = "eos"
    PAD = "pad"
    MASK = "mask"


@dataclass(frozen=True)
class TokenSpace:
    """Text alphabet ids 0..n_text-1 plus reserved EOS/PAD/MASK ids."""

    n_text: int

    @property
    def eos_id(self) -> int:
        return self.n_text

    @property
    def pad_id(self) -> int:
        return self.n_text + 1

    @property
    def mask_id(self) -> int:
        return self.n_text + 2

    @property
    def vocab_size(self) -> int:
        return self.n_text + 3

    def role_of(self, token_id: int) -> Role:
        if 0 <= token_id < self.n_text:
            return Role.TEXT
        if token_id == self.eos_id:
            return Role.EOS
        if token_id == self.pad_id:
            return Role.PAD
        if token_id == self.mask_id:
            return Role.MASK
        raise VocabError(f"token id {token_id} outside vocabulary of {self.vocab_size}")


@dataclass
class Canvas:
    """T token ids; k is the transcript length for clean/pinned layouts."""

    ids: np.ndarray
    space: TokenSpace
    k: int | None = None

    @property
    def length(self) -> int:
        return int(self.ids.shape[0])

    def copy(self) -> "Canvas":
        return Canvas(self.ids.copy(), self.space, self.k)

    def masked_positions(self) -> np.ndarray:
        return np.flatnonzero(self.ids == self.space.mask_id)

    def roles(self) -> list[Role]:
        return [self.space.role_of(int(i)) for i in self.ids]


def build_clean_canvas(token_ids, T: int, space: TokenSpace) -> Canvas:
    """Lay out transcript + EOS + PAD; requires 1 <= K <= T-1."""
    tok = np.asarray(token_ids, dtype=np.int64)
    k = int(tok.shape[0])
    if not 1 <= k <= T - 1:
        raise LengthError(f"transcript length {k} outside [1, {T - 1}]")
    if tok.size and (tok.min() < 0 or tok.max() >= space.n_text):
        raise VocabError("transcript contains non-text token ids")
    ids = np.full(T, space.pad_id, dtype=np.int64)
    ids[:k] = tok
    ids[k] = space.eos_id
    return Canvas(ids, space, k)


def supervision_set(canvas: Canvas, stage: int) -> np.ndarray:
    """Positions eligible for masking/supervision (0-indexed).

    Stage 1 covers the transcript and its EOS only; stage 2 covers every
    cell including PAD, which is what teaches the model to lay out its own
    length at decode time.
    """
    if canvas.k is None:
        raise LengthError("supervision requires a clean canvas with known k")
    if stage == 1:
        return np.arange(canvas.k + 1)
    if stage == 2:
        return np.arange(canvas.length)
    raise ValueError(f"stage must be 1 or 2, got {stage}")


@dataclass
class MaskDraw:
    """One forward-process draw: mask ratio t and the masked positions."""

    t: float
    positions: np.ndarray


def sample_mask_positions(eligible: np.ndarray, t: float, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli(t) subset of eligible, forced non-empty by a uniform pick."""
    hit = rng.random(eligible.shape[0]) < t
    if not hit.any():
        hit[rng.integers(eligible.shape[0])] = True
    return eligible[hit]


def apply_forward_mask(canvas: Canvas, stage: int, rng: np.random.Generator) -> tuple[Canvas, MaskDraw]:
    """Draw t ~ U(0, 1] and mask a Bernoulli(t) subset of the supervised set."""
    eligible = supervision_set(canvas, stage)
    t = 1.0 - rng.random()  # open at 0: weight 1/t must stay finite
    positions = sample_mask_positions(eligible, t, rng)
    noisy = canvas.copy()
    noisy.ids[positions] = canvas.space.mask_id
    return noisy, MaskDraw(t=t, positions=positions)


def unmask(noisy: Canvas, clean: Canvas, positions) -> Canvas:
    out = noisy.copy()
    out.ids[positions] = clean.ids[positions]
    return out


def denoise_loss(logits: Tensor, clean: Canvas, draw: MaskDraw) -> Tensor:
    """1/t-weighted cross entropy over the masked positions of one canvas."""
    if not 0.0 < draw.t <= 1.0:
        raise ValueError(f"mask ratio t={draw.t} outside (0, 1]")
    if draw.positions.size == 0:
        raise ValueError("mask draw has no positions")
    if logits.shape[0] != clean.length:
        raise LengthError(f"logits rows {logits.shape[0]} != canvas length {clean.length}")
    weights = np.zeros(clean.length, dtype=logits.dtype)
    weights[draw.positions] = 1.0 / draw.t
    return cross_entropy(logits, clean.ids, weights)
