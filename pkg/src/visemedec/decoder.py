"""Iterative unmasking decoders and candidate reranking.

Three entry points share one engine:
  * decode_implicit: all cells start masked, the model lays out its own
    EOS/PAD; transcript = maximal text prefix.
  * decode_pinned: EOS pinned at position k, PAD after, the first k cells
    decode under a text-only token restriction.
  * decode_candidates + rerank_select: pinned decodes over a window of
    lengths from the length posterior, scored jointly by decoder
    confidence, length posterior mass and iteration count.

Per iteration every still-masked cell in the active block whose top
probability clears the threshold commits; if none clears it, the single
most confident cell commits (lowest position on ties).  Committed cells
are frozen for the rest of the decode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .canvas import Canvas, TokenSpace
from .model import CondSequence, LengthPosterior, denoiser_config, denoiser_probs


class DecodeError(RuntimeError):
    def __init__(self, msg: str, trace: "DecodeTrace | None" = None):
        super().__init__(msg)
        self.trace = trace


class RerankError(ValueError):
    pass


@dataclass
class DecodeConfig:
    threshold: float = 0.9
    block_size: int = 32
    radius: int = 5          # length window half-width
    lam: float = 0.9         # weight on log length-posterior
    beta: float = 0.7        # penalty per decode iteration
    max_iters: int | None = None  # None: canvas length (never binds, defensive)

    def __post_init__(self):
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError(f"threshold must be in (0, 1], got {self.threshold}")
        if self.block_size < 1:
            raise ValueError(f"block_size must be >= 1, got {self.block_size}")
        if self.radius < 0:
            raise ValueError(f"radius must be >= 0, got {self.radius}")


@dataclass
class TraceStep:
    iteration: int
    commits: list[tuple[int, int, float]]  # (position, token id, confidence)


@dataclass
class DecodeTrace:
    steps: list[TraceStep] = field(default_factory=list)

    def committed_positions(self) -> list[int]:
        return [pos for s in self.steps for pos, _, _ in s.commits]


@dataclass
class DecodeOutcome:
    canvas: Canvas
    commits: dict[int, tuple[int, float]]  # position -> (token, confidence)
    n_iters: int
    trace: DecodeTrace


@dataclass
class ImplicitResult:
    token_ids: np.ndarray  # text prefix
    n_iters: int
    flags: tuple[str, ...]
    outcome: DecodeOutcome


@dataclass
class CandidateResult:
    k: int
    token_ids: np.ndarray
    confidences: np.ndarray  # per text position, in position order
    n_iters: int
    p_k: float | None = None
    score: float | None = None
    outcome: DecodeOutcome | None = None


def allowed_tokens(space: TokenSpace, length: int, text_only: bool) -> np.ndarray:
    """(length, vocab) bool mask of permitted commit targets; MASK never is."""
    row = np.zeros(space.vocab_size, dtype=bool)
    row[: space.n_text] = True
    if not text_only:
        row[space.eos_id] = True
        row[space.pad_id] = True
    return np.broadcast_to(row, (length, space.vocab_size)).copy()


def commit_step(probs: np.ndarray, state: Canvas, active: np.ndarray,
                threshold: float) -> dict[int, tuple[int, float]]:
    """Choose this iteration's commits among active masked cells.

    probs rows must already be restricted to permitted tokens (disallowed
    entries zeroed, not renormalized); confidence is the row maximum.
    """
    cand = active & (state.ids == state.space.mask_id)
    if not cand.any():
        raise DecodeError("commit_step called with nothing left to commit")
    conf = np.where(cand, probs.max(axis=1), -1.0)
    toks = probs.argmax(axis=1)
    chosen = np.flatnonzero(cand & (conf > threshold))
    if chosen.size == 0:
        chosen = np.array([int(np.argmax(conf))])  # argmax ties -> lowest index
    return {int(p): (int(toks[p]), float(conf[p])) for p in chosen}


def _run_engine(probs_fn, start: Canvas, active: np.ndarray, allowed: np.ndarray,
                threshold: float, block_size: int | None,
                max_iters: int | None) -> DecodeOutcome:
    state = start.copy()
    positions = np.flatnonzero(active)
    if block_size is None:
        blocks = [positions]
    else:
        blocks = [positions[i:i + block_size] for i in range(0, positions.size, block_size)]
    cap = max_iters if max_iters is not None else state.length
    commits: dict[int, tuple[int, float]] = {}
    trace = DecodeTrace()
    n_iters = 0
    for block in blocks:
        block_mask = np.zeros(state.length, dtype=bool)
        block_mask[block] = True
        while (block_mask & (state.ids == state.space.mask_id)).any():
            if n_iters >= cap:
                raise DecodeError(f"decode exceeded {cap} iterations", trace)
            probs = probs_fn(state) * allowed
            step = commit_step(probs, state, block_mask, threshold)
            for pos, (tok, conf) in step.items():
                state.ids[pos] = tok
                commits[pos] = (tok, conf)
            n_iters += 1
            trace.steps.append(TraceStep(n_iters, sorted((p, t, c) for p, (t, c) in step.items())))
    return DecodeOutcome(canvas=state, commits=commits, n_iters=n_iters, trace=trace)


def _denoiser_probs_fn(params, cond: CondSequence):
    return lambda state: denoiser_probs(params, state, cond)


def _pinned_start(space: TokenSpace, T: int, k: int) -> tuple[Canvas, np.ndarray]:
    if not 1 <= k <= T - 1:
        raise ValueError(f"pinned length {k} outside [1, {T - 1}]")
    ids = np.full(T, space.pad_id, dtype=np.int64)
    ids[:k] = space.mask_id
    ids[k] = space.eos_id
    active = np.zeros(T, dtype=bool)
    active[:k] = True
    return Canvas(ids, space, k), active


def _implicit_start(space: TokenSpace, T: int) -> tuple[Canvas, np.ndarray]:
    ids = np.full(T, space.mask_id, dtype=np.int64)
    return Canvas(ids, space, None), np.ones(T, dtype=bool)


def _extract_prefix(canvas: Canvas) -> tuple[np.ndarray, tuple[str, ...]]:
    space = canvas.space
    flags: list[str] = []
    if not (canvas.ids == space.eos_id).any():
        flags.append("no_eos")
        ids = canvas.ids[canvas.ids < space.n_text]
    else:
        n = 0
        while n < canvas.length and canvas.ids[n] < space.n_text:
            n += 1
        ids = canvas.ids[:n]
    if ids.size == 0:
        flags.append("empty")
    return ids.copy(), tuple(flags)


def decode_implicit(params, cond: CondSequence, cfg: DecodeConfig,
                    probs_fn=None) -> ImplicitResult:
    """Fully parallel decode over the whole canvas; model emits EOS/PAD."""
    space, T = _decode_space(params)
    start, active = _implicit_start(space, T)
    fn = probs_fn or _denoiser_probs_fn(params, cond)
    outcome = _run_engine(fn, start, active, allowed_tokens(space, T, text_only=False),
                          cfg.threshold, None, cfg.max_iters)
    ids, flags = _extract_prefix(outcome.canvas)
    return ImplicitResult(ids, outcome.n_iters, flags, outcome)


def decode_pinned(params, cond: CondSequence, k: int, cfg: DecodeConfig,
                  probs_fn=None) -> CandidateResult:
    """Decode with EOS pinned at k; text cells restricted to the alphabet."""
    space, T = _decode_space(params)
    start, active = _pinned_start(space, T, k)
    fn = probs_fn or _denoiser_probs_fn(params, cond)
    outcome = _run_engine(fn, start, active, allowed_tokens(space, T, text_only=True),
                          cfg.threshold, None, cfg.max_iters)
    return _finish_candidate(k, outcome)


def _finish_candidate(k: int, outcome: DecodeOutcome) -> CandidateResult:
    ids = outcome.canvas.ids[:k].copy()
    conf = np.array([outcome.commits[p][1] for p in range(k)], dtype=np.float64)
    return CandidateResult(k=k, token_ids=ids, confidences=conf,
                           n_iters=outcome.n_iters, outcome=outcome)


def decode_blocks(params, cond: CondSequence, cfg: DecodeConfig,
                  k: int | None = None, probs_fn=None):
    """Semi-autoregressive variant: cfg.block_size cells at a time, left to
    right; block_size=1 is autoregressive order, block_size=T is fully
    parallel.  k=None decodes implicitly, otherwise pinned at k."""
    space, T = _decode_space(params)
    if k is None:
        start, active = _implicit_start(space, T)
        allowed = allowed_tokens(space, T, text_only=False)
    else:
        start, active = _pinned_start(space, T, k)
        allowed = allowed_tokens(space, T, text_only=True)
    fn = probs_fn or _denoiser_probs_fn(params, cond)
    outcome = _run_engine(fn, start, active, allowed, cfg.threshold,
                          cfg.block_size, cfg.max_iters)
    if k is None:
        ids, flags = _extract_prefix(outcome.canvas)
        return ImplicitResult(ids, outcome.n_iters, flags, outcome)
    return _finish_candidate(k, outcome)


def _decode_space(params) -> tuple[TokenSpace, int]:
    cfg = denoiser_config(params)
    return TokenSpace(cfg.vocab - 3), cfg.canvas_len


# ---------------------------------------------------------------------------
# length-guided candidates
# ---------------------------------------------------------------------------


def build_length_window(posterior: LengthPosterior, radius: int, T: int) -> list[int]:
    """Lengths K_pred +- radius, clamped to the valid range [1, T-1]."""
    kp = posterior.k_pred
    return [k for k in range(kp - radius, kp + radius + 1) if 1 <= k <= T - 1]


def decode_candidates(params, cond: CondSequence, window: list[int], cfg: DecodeConfig,
                      posterior: LengthPosterior | None = None, batched: bool = True,
                      probs_fn=None) -> list[CandidateResult]:
    """Pinned decodes for every window length.

    batched=True steps all unfinished candidates in lockstep rounds and is
    bit-identical to the sequential path: candidate trajectories are
    independent, finished ones are frozen while the rest continue.
    """
    if not window:
        raise ValueError("empty candidate window")
    space, T = _decode_space(params)
    fn = probs_fn or _denoiser_probs_fn(params, cond)
    allowed = allowed_tokens(space, T, text_only=True)
    results: list[CandidateResult | None] = [None] * len(window)
    if not batched:
        for i, k in enumerate(window):
            results[i] = decode_pinned(params, cond, k, cfg, probs_fn=fn)
    else:
        lanes = []
        for k in window:
            start, active = _pinned_start(space, T, k)
            lanes.append({"k": k, "state": start, "active": active,
                          "commits": {}, "trace": DecodeTrace(), "iters": 0})
        live = list(range(len(lanes)))
        while live:
            still = []
            for i in live:
                ln = lanes[i]
                state = ln["state"]
                probs = fn(state) * allowed
                step = commit_step(probs, state, ln["active"], cfg.threshold)
                for pos, (tok, confv) in step.items():
                    state.ids[pos] = tok
                    ln["commits"][pos] = (tok, confv)
                ln["iters"] += 1
                ln["trace"].steps.append(
                    TraceStep(ln["iters"], sorted((p, t, c) for p, (t, c) in step.items())))
                if (state.ids == space.mask_id).any():
                    still.append(i)
            live = still
        for i, ln in enumerate(lanes):
            outcome = DecodeOutcome(ln["state"], ln["commits"], ln["iters"], ln["trace"])
            results[i] = _finish_candidate(ln["k"], outcome)
    if posterior is not None:
        for r in results:
            r.p_k = posterior.p_of(r.k)
    return results  # type: ignore[return-value]


def rerank_score(confidences, p_k: float, n_k: int, lam: float, beta: float) -> float:
    """s = sum_i log c_i + lam * log p_k - beta * n_k; zero mass scores -inf."""
    if p_k is None or p_k <= 0.0:
        return -math.inf
    total = 0.0
    for c in confidences:
        if c <= 0.0:
            return -math.inf
        total += math.log(c)
    return total + lam * math.log(p_k) - beta * n_k


def rerank_select(candidates: list[CandidateResult], lam: float,
                  beta: float) -> CandidateResult:
    """Highest score wins; exact ties go to the smaller k.

    Scores are written back onto the candidates.  Candidate order does not
    matter; all scores -inf (every p_k zero) is an error.
    """
    if not candidates:
        raise RerankError("no candidates to rerank")
    for c in candidates:
        c.score = rerank_score(c.confidences, c.p_k, c.n_iters, lam, beta)
    best = None
    for c in sorted(candidates, key=lambda c: c.k):
        if best is None or c.score > best.score:
            best = c
    if best.score == -math.inf:
        raise RerankError("all candidates have zero posterior mass")
    return best


def decode_length_guided(params, lp_params, cond: CondSequence, cfg: DecodeConfig,
                         batched: bool = True):
    """Posterior -> window -> candidates -> rerank; returns (best, all)."""
    from .model import length_forward

    _, T = _decode_space(params)
    posterior = length_forward(lp_params, cond)
    window = build_length_window(posterior, cfg.radius, T)
    cands = decode_candidates(params, cond, window, cfg, posterior=posterior, batched=batched)
    best = rerank_select(cands, cfg.lam, cfg.beta)
    return best, cands
