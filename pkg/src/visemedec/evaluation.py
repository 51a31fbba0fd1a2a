"""Metrics, baselines and the standard evaluation scenarios.

WER is word-level Levenshtein with substitution/deletion/insertion counts;
the corpus number aggregates total edits over total reference words, which
is not the mean of per-sample rates (short references would otherwise be
overweighted).  RTF is decode wall time over nominal clip duration, batch
size 1, warmup excluded.
"""

from __future__ import annotations

import math
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .decoder import (
    CandidateResult,
    DecodeConfig,
    build_length_window,
    decode_blocks,
    decode_candidates,
    decode_implicit,
    decode_pinned,
    rerank_select,
)
from .model import encode_clip, length_forward
from .synthdata import (
    ALPHABET,
    N_VISEME_CLASSES,
    Sample,
    detokenize,
    viseme_map,
)

# ---------------------------------------------------------------------------
# word error rate
# ---------------------------------------------------------------------------


def normalize_text(text: str) -> str:
    """Lowercase, trim, collapse runs of whitespace; applied to both sides."""
    return " ".join(text.lower().split())


@dataclass
class EditCounts:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    n_ref: int = 0

    @property
    def edits(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    def __iadd__(self, other: "EditCounts") -> "EditCounts":
        self.substitutions += other.substitutions
        self.deletions += other.deletions
        self.insertions += other.insertions
        self.n_ref += other.n_ref
        return self


def wer_counts(ref: str, hyp: str) -> EditCounts:
    """Minimum word edits turning hyp into ref, split into S/D/I.

    Backtrace prefers diagonal, then deletion, then insertion, so the split
    is deterministic (the total is unique regardless).
    """
    r = normalize_text(ref).split()
    h = normalize_text(hyp).split()
    if not r:
        raise ValueError("empty reference transcript")
    nr, nh = len(r), len(h)
    dist = np.zeros((nr + 1, nh + 1), dtype=np.int64)
    dist[:, 0] = np.arange(nr + 1)
    dist[0, :] = np.arange(nh + 1)
    for i in range(1, nr + 1):
        for j in range(1, nh + 1):
            sub = dist[i - 1, j - 1] + (r[i - 1] != h[j - 1])
            dist[i, j] = min(sub, dist[i - 1, j] + 1, dist[i, j - 1] + 1)
    out = EditCounts(n_ref=nr)
    i, j = nr, nh
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (r[i - 1] != h[j - 1]):
            out.substitutions += r[i - 1] != h[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            out.deletions += 1
            i -= 1
        else:
            out.insertions += 1
            j -= 1
    return out


def wer_percent(counts: EditCounts) -> float:
    return 100.0 * counts.edits / counts.n_ref


def corpus_wer(pairs: list[tuple[str, str]]) -> tuple[float, EditCounts]:
    """Total-edits / total-ref-words over (ref, hyp) pairs, as a percentage."""
    total = EditCounts()
    for ref, hyp in pairs:
        total += wer_counts(ref, hyp)
    return wer_percent(total), total


def mean_sample_wer(pairs: list[tuple[str, str]]) -> float:
    """Mean of per-sample rates; reported for contrast, never headline."""
    return float(np.mean([wer_percent(wer_counts(r, h)) for r, h in pairs]))


# ---------------------------------------------------------------------------
# length metrics
# ---------------------------------------------------------------------------

ACC_WINDOWS = (0, 1, 3, 5)


def length_metrics(predicted, true) -> dict[str, float]:
    """Acc@N (percent within +-N) for N in {0,1,3,5} plus MAE."""
    p = np.asarray(predicted, dtype=np.int64)
    t = np.asarray(true, dtype=np.int64)
    if p.shape != t.shape or p.ndim != 1 or p.size == 0:
        raise ValueError(f"prediction/truth shape mismatch: {p.shape} vs {t.shape}")
    err = np.abs(p - t)
    out = {f"acc@{n}": 100.0 * float((err <= n).mean()) for n in ACC_WINDOWS}
    out["mae"] = float(err.mean())
    return out


# ---------------------------------------------------------------------------
# real-time factor
# ---------------------------------------------------------------------------


def measure_rtf(decode_fn, samples: list[Sample], warmup: int = 5) -> float:
    """Wall-time / clip-duration over samples after `warmup` discarded runs.

    decode_fn takes one Sample; samples are processed one at a time.
    """
    if len(samples) <= warmup:
        raise ValueError(f"need more than {warmup} samples, got {len(samples)}")
    for s in samples[:warmup]:
        decode_fn(s)
    total_time = 0.0
    total_duration = 0.0
    for s in samples[warmup:]:
        t0 = time.perf_counter()
        decode_fn(s)
        total_time += time.perf_counter() - t0
        total_duration += s.clip.duration
    if total_duration <= 0.0:
        raise ValueError("zero total clip duration")
    return total_time / total_duration


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def char_frequencies(transcripts: list[str]) -> dict[str, int]:
    counts = {c: 0 for c in ALPHABET}
    for text in transcripts:
        for ch in text:
            counts[ch] += 1
    return counts


class VisemeMLBaseline:
    """Frame-majority decoder with per-class most-frequent-character emission.

    Given the true length k, the clip is split into k contiguous chunks;
    each chunk votes for its majority viseme class (lowest class on ties)
    and emits that class's most frequent character in the training corpus.
    An upper-bound-style classical baseline: it sees the true segmentation
    granularity but cannot resolve within-class ambiguity.
    """

    def __init__(self, train_transcripts: list[str]):
        freq = char_frequencies(train_transcripts)
        self.class_char: dict[int, str] = {}
        for ch in ALPHABET:
            cls = viseme_map(ch)
            cur = self.class_char.get(cls)
            if cur is None or freq[ch] > freq[cur]:
                self.class_char[cls] = ch
        self.fallback = max(ALPHABET, key=lambda c: freq[c])

    def transcribe(self, frames: np.ndarray, k: int) -> str:
        chunks = np.array_split(np.asarray(frames), k)
        out = []
        for chunk in chunks:
            if chunk.size == 0:
                out.append(self.fallback)
                continue
            votes = np.bincount(chunk, minlength=N_VISEME_CLASSES)
            out.append(self.class_char[int(np.argmax(votes))])
        return "".join(out)


def constant_ratio_length(n_frames: int, k_max: int) -> int:
    """Length guess from the mean dwell of 2 frames per character."""
    return int(np.clip(int(np.floor(n_frames / 2.0 + 0.5)), 1, k_max))


# ---------------------------------------------------------------------------
# rerank grid search
# ---------------------------------------------------------------------------

GRID_VALUES = tuple(round(0.1 * i, 1) for i in range(11))


@dataclass
class GridSearchResult:
    lams: tuple[float, ...]
    betas: tuple[float, ...]
    wer: np.ndarray          # (len(lams), len(betas))
    best_lam: float
    best_beta: float

    def write_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("lam\\beta," + ",".join(f"{b:.1f}" for b in self.betas) + "\n")
            for i, lam in enumerate(self.lams):
                row = ",".join(f"{self.wer[i, j]:.4f}" for j in range(len(self.betas)))
                f.write(f"{lam:.1f},{row}\n")


def collect_candidates(params, lp_params, samples: list[Sample],
                       cfg: DecodeConfig) -> list[tuple[str, list[CandidateResult]]]:
    """Decode each sample's candidate window once; rerank later, per cell."""
    cached = []
    for s in samples:
        cond = encode_clip(s.clip)
        posterior = length_forward(lp_params, cond)
        window = build_length_window(posterior, cfg.radius, _canvas_len(params))
        cands = decode_candidates(params, cond, window, cfg, posterior=posterior)
        cached.append((s.text, cands))
    return cached


def _canvas_len(params) -> int:
    from .model import denoiser_config

    return denoiser_config(params).canvas_len


def rerank_cached(cached, lam: float, beta: float) -> list[tuple[str, str]]:
    pairs = []
    for ref, cands in cached:
        best = rerank_select(cands, lam, beta)
        pairs.append((ref, detokenize(best.token_ids)))
    return pairs


def grid_search_rerank(cached, lams=GRID_VALUES, betas=GRID_VALUES) -> GridSearchResult:
    """Corpus WER for every (lam, beta) cell from cached candidates.

    Candidates are decoded once; only the rerank is recomputed per cell.
    Ties on WER resolve to the smaller lam, then the smaller beta.
    """
    wer = np.zeros((len(lams), len(betas)))
    best = (math.inf, None, None)
    for i, lam in enumerate(lams):
        for j, beta in enumerate(betas):
            w, _ = corpus_wer(rerank_cached(cached, lam, beta))
            wer[i, j] = w
            if w < best[0]:
                best = (w, lam, beta)
    return GridSearchResult(tuple(lams), tuple(betas), wer, best[1], best[2])


# ---------------------------------------------------------------------------
# scenario runner
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    scenario: str
    wer: float
    counts: EditCounts
    n_samples: int
    rtf: float | None = None
    extra: dict = field(default_factory=dict)

    def line(self) -> str:
        parts = [f"{self.scenario:<28s} WER {self.wer:7.2f}%",
                 f"({self.counts.edits} edits / {self.counts.n_ref} words, "
                 f"n={self.n_samples})"]
        if self.rtf is not None:
            parts.append(f"RTF {self.rtf:.3f}")
        return "  ".join(parts)


BLOCK_SWEEP = (1, 2, 4, 8, 16, 32)


def _decode_pairs(params, samples, cfg, mode: str, lp_params=None,
                  block_size: int | None = None):
    pairs = []
    for s in samples:
        cond = encode_clip(s.clip)
        if mode == "oracle":
            res = decode_pinned(params, cond, s.k, cfg)
            hyp = detokenize(res.token_ids)
        elif mode == "implicit":
            if block_size is None:
                res = decode_implicit(params, cond, cfg)
            else:
                bcfg = DecodeConfig(threshold=cfg.threshold, block_size=block_size,
                                    radius=cfg.radius, lam=cfg.lam, beta=cfg.beta)
                res = decode_blocks(params, cond, bcfg)
            hyp = detokenize(res.token_ids)
        elif mode == "length_guided":
            from .decoder import decode_length_guided

            best, _ = decode_length_guided(params, lp_params, cond, cfg)
            hyp = detokenize(best.token_ids)
        else:
            raise ValueError(f"unknown decode mode {mode!r}")
        pairs.append((s.text, hyp))
    return pairs


def run_scenarios(stage1, stage2, lp_params, samples: list[Sample], cfg: DecodeConfig,
                  block_sweep: bool = False, log=print) -> list[EvalReport]:
    """Standard comparison table; scenarios missing a checkpoint are skipped.

    Covers both stages under oracle-length and implicit decoding, then
    length-guided reranking variants (posterior-only and with the iteration
    penalty) on the stage-2 model, plus an optional block-size sweep.
    """
    reports = []

    def add(name, pairs, **extra):
        w, counts = corpus_wer(pairs)
        reports.append(EvalReport(name, w, counts, len(pairs), extra=extra))

    def skip(name, why):
        log(f"warning: skipping {name}: {why}", file=sys.stderr)

    for label, params in (("stage1", stage1), ("stage2", stage2)):
        if params is None:
            skip(f"{label}_oracle & {label}_implicit", "no checkpoint")
            continue
        add(f"{label}_oracle", _decode_pairs(params, samples, cfg, "oracle"))
        add(f"{label}_implicit", _decode_pairs(params, samples, cfg, "implicit"))
    if stage2 is not None and lp_params is not None:
        cached = collect_candidates(stage2, lp_params, samples, cfg)
        nopen = rerank_cached(cached, cfg.lam, 0.0)
        add("stage2_rerank_posterior", nopen, lam=cfg.lam, beta=0.0)
        full = rerank_cached(cached, cfg.lam, cfg.beta)
        add("stage2_rerank_full", full, lam=cfg.lam, beta=cfg.beta)
    elif stage2 is not None:
        skip("stage2_rerank_*", "no length-predictor checkpoint")
    if block_sweep and stage2 is not None:
        for b in BLOCK_SWEEP:
            add(f"stage2_implicit_block{b}",
                _decode_pairs(stage2, samples, cfg, "implicit", block_size=b),
                block_size=b)
    return reports


def write_reports_csv(reports: list[EvalReport], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("scenario,wer,substitutions,deletions,insertions,ref_words,n_samples,rtf\n")
        for r in reports:
            rtf = f"{r.rtf:.4f}" if r.rtf is not None else ""
            f.write(f"{r.scenario},{r.wer:.4f},{r.counts.substitutions},"
                    f"{r.counts.deletions},{r.counts.insertions},{r.counts.n_ref},"
                    f"{r.n_samples},{rtf}\n")


# ---------------------------------------------------------------------------
# decode traces
# ---------------------------------------------------------------------------


def render_canvas(ids, space, masked_glyph: str = "_") -> str:
    """One glyph per cell: text char, # for EOS, . for PAD, _ for MASK."""
    glyphs = []
    for tid in ids:
        tid = int(tid)
        if tid < space.n_text:
            glyphs.append(ALPHABET[tid])
        elif tid == space.eos_id:
            glyphs.append("#")
        elif tid == space.pad_id:
            glyphs.append(".")
        else:
            glyphs.append(masked_glyph)
    return "".join(glyphs)


def emit_trace(sample: Sample, start_ids, trace, space, path: str) -> None:
    """Human-readable per-iteration decode snapshots.

    Legend: '_' masked, '#' EOS, '.' PAD; confidences at 6 decimals.  The
    final line must contain no '_' (every cell committed).
    """
    ids = np.array(start_ids, dtype=np.int64)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# sample {sample.sample_id}\n")
        f.write(f"# ref: {sample.text}\n")
        f.write("# legend: _=masked  #=eos  .=pad\n")
        f.write(f"iter 0 | {render_canvas(ids, space)}\n")
        for step in trace.steps:
            for pos, tok, _ in step.commits:
                ids[pos] = tok
            detail = " ".join(f"{pos}:{conf:.6f}" for pos, _, conf in step.commits)
            f.write(f"iter {step.iteration} | {render_canvas(ids, space)} | {detail}\n")
