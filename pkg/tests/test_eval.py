"""WER against a brute-force oracle, RTF protocol, baselines, grid search."""

import time

import numpy as np
import pytest

from visemedec.canvas import TokenSpace
from visemedec.decoder import CandidateResult, DecodeConfig, decode_implicit
from visemedec.evaluation import (
    BLOCK_SWEEP,
    GRID_VALUES,
    EditCounts,
    EvalReport,
    VisemeMLBaseline,
    char_frequencies,
    constant_ratio_length,
    corpus_wer,
    emit_trace,
    grid_search_rerank,
    length_metrics,
    mean_sample_wer,
    measure_rtf,
    normalize_text,
    render_canvas,
    rerank_cached,
    run_scenarios,
    wer_counts,
    wer_percent,
    write_reports_csv,
)
from visemedec.model import DenoiserConfig, init_denoiser
from visemedec.rng import substream
from visemedec.synthdata import ChannelConfig, Sample, VisemeClip, generate_split, viseme_map


def brute_force_edits(ref_words, hyp_words):
    """Exhaustive recursion over alignments; independent of the DP table."""
    if not ref_words:
        return len(hyp_words)
    if not hyp_words:
        return len(ref_words)
    return min(
        brute_force_edits(ref_words[1:], hyp_words[1:]) + (ref_words[0] != hyp_words[0]),
        brute_force_edits(ref_words[1:], hyp_words) + 1,
        brute_force_edits(ref_words, hyp_words[1:]) + 1,
    )


class TestWer:
    def test_identical(self):
        c = wer_counts("the quick fox", "the quick fox")
        assert (c.substitutions, c.deletions, c.insertions, c.n_ref) == (0, 0, 0, 3)
        assert wer_percent(c) == 0.0

    def test_single_substitution(self):
        c = wer_counts("a b c", "a x c")
        assert (c.substitutions, c.deletions, c.insertions) == (1, 0, 0)
        assert wer_percent(c) == pytest.approx(100.0 / 3.0)

    def test_morphological_substitution(self):
        c = wer_counts("harvest contaminated tobacco",
                       "harvested contaminated tobacco")
        assert (c.substitutions, c.deletions, c.insertions) == (1, 0, 0)
        assert wer_percent(c) == pytest.approx(100.0 / 3.0)

    def test_deletion_and_insertion(self):
        d = wer_counts("a b c", "a c")
        assert (d.substitutions, d.deletions, d.insertions) == (0, 1, 0)
        i = wer_counts("a c", "a b c")
        assert (i.substitutions, i.deletions, i.insertions) == (0, 0, 1)

    def test_empty_hypothesis_all_deletions(self):
        c = wer_counts("a b c", "")
        assert c.deletions == 3 and c.edits == 3

    def test_empty_reference_rejected(self):
        with pytest.raises(ValueError):
            wer_counts("", "something")
        with pytest.raises(ValueError):
            wer_counts("   ", "something")

    def test_normalization(self):
        assert normalize_text("  Hello   WORLD ") == "hello world"
        assert wer_counts("  Hello   WORLD ", "hello world").edits == 0

    def test_wer_can_exceed_100(self):
        c = wer_counts("a", "x y z")
        assert wer_percent(c) > 100.0

    def test_matches_brute_force(self):
        rng = substream(31, "wer-brute")
        vocab = ["red", "green", "blue", "gold"]
        for _ in range(60):
            ref = [vocab[i] for i in rng.integers(0, 4, size=rng.integers(1, 6))]
            hyp = [vocab[i] for i in rng.integers(0, 4, size=rng.integers(0, 6))]
            got = wer_counts(" ".join(ref), " ".join(hyp)).edits
            assert got == brute_force_edits(ref, hyp)


class TestCorpusAggregation:
    PAIRS = [("a", "b"), ("c d e f g h i j k l", "c d e f g h i j k l")]

    def test_corpus_is_edit_weighted(self):
        w, counts = corpus_wer(self.PAIRS)
        assert counts.n_ref == 11 and counts.edits == 1
        assert w == pytest.approx(100.0 / 11.0)

    def test_mean_of_rates_differs(self):
        # short references dominate the mean; the corpus number avoids that
        assert mean_sample_wer(self.PAIRS) == pytest.approx(50.0)
        assert corpus_wer(self.PAIRS)[0] != mean_sample_wer(self.PAIRS)

    def test_counts_accumulate(self):
        total = EditCounts()
        total += EditCounts(substitutions=1, n_ref=3)
        total += EditCounts(deletions=2, n_ref=4)
        assert total.edits == 3 and total.n_ref == 7


class TestLengthMetrics:
    def test_perfect(self):
        m = length_metrics([4, 7, 2], [4, 7, 2])
        assert m["acc@0"] == 100.0 and m["mae"] == 0.0

    def test_hand_case(self):
        m = length_metrics([3, 5], [4, 5])
        assert m["acc@0"] == 50.0
        assert m["acc@1"] == 100.0
        assert m["acc@3"] == 100.0
        assert m["acc@5"] == 100.0
        assert m["mae"] == pytest.approx(0.5)

    def test_window_monotonicity(self):
        rng = substream(32, "lm")
        p = rng.integers(1, 32, size=200)
        t = rng.integers(1, 32, size=200)
        m = length_metrics(p, t)
        assert m["acc@0"] <= m["acc@1"] <= m["acc@3"] <= m["acc@5"]

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            length_metrics([1, 2], [1])
        with pytest.raises(ValueError):
            length_metrics([], [])


def make_timed_samples(n, frames_each=5):
    clip = VisemeClip(np.zeros(frames_each, dtype=np.int64))
    return [Sample(f"s{i}", "x", clip, 1) for i in range(n)]


class TestMeasureRtf:
    def test_half_speed_stub(self):
        samples = make_timed_samples(8)  # 0.2 s nominal duration each

        def decode(sample):
            time.sleep(sample.clip.duration / 2)

        rtf = measure_rtf(decode, samples, warmup=2)
        assert rtf == pytest.approx(0.5, abs=0.08)

    def test_warmup_excluded_from_timing(self):
        samples = make_timed_samples(8)
        calls = []

        def decode(sample):
            calls.append(sample.sample_id)
            if len(calls) <= 2:
                time.sleep(0.25)  # slow warmup must not pollute the figure

        rtf = measure_rtf(decode, samples, warmup=2)
        assert len(calls) == 8
        assert rtf < 0.25

    def test_too_few_samples_rejected(self):
        with pytest.raises(ValueError):
            measure_rtf(lambda s: None, make_timed_samples(5), warmup=5)

    def test_zero_duration_rejected(self):
        clip = VisemeClip(np.array([], dtype=np.int64))
        samples = [Sample(f"s{i}", "x", clip, 1) for i in range(3)]
        with pytest.raises(ValueError):
            measure_rtf(lambda s: None, samples, warmup=1)


class TestBaselines:
    def test_class_char_uses_training_frequency(self):
        base = VisemeMLBaseline(["pp b", "p m"])
        assert base.class_char[viseme_map("p")] == "p"
        base2 = VisemeMLBaseline(["bb bbb", "p m"])
        assert base2.class_char[viseme_map("p")] == "b"

    def test_transcribe_majority_per_chunk(self):
        base = VisemeMLBaseline(["pat pat pat"])
        frames = np.repeat([viseme_map(c) for c in "pat"], 2)
        assert base.transcribe(frames, k=3) == "pat"

    def test_tie_takes_lowest_class(self):
        base = VisemeMLBaseline(["aeiou"])
        frames = np.array([viseme_map("a"), viseme_map("a"),
                           viseme_map("e"), viseme_map("e")])
        lo = min(viseme_map("a"), viseme_map("e"))
        expected = base.class_char[lo]
        assert base.transcribe(frames, k=1) == expected

    def test_short_clip_pads_with_fallback(self):
        base = VisemeMLBaseline(["eee"])
        out = base.transcribe(np.array([viseme_map("p")]), k=3)
        assert len(out) == 3
        assert out[1] == base.fallback and out[2] == base.fallback

    def test_char_frequencies_counts(self):
        freq = char_frequencies(["ab a"])
        assert freq["a"] == 2 and freq["b"] == 1 and freq[" "] == 1

    def test_constant_ratio_rounds_to_nearest(self):
        assert constant_ratio_length(10, 31) == 5
        assert constant_ratio_length(11, 31) == 6
        assert constant_ratio_length(1, 31) == 1
        assert constant_ratio_length(100, 31) == 31


def cached_candidates():
    """Two samples, two candidates each, crafted so beta flips the winner.

    sample 1 (ref "aa"): k=2 slow-but-right vs k=3 fast-but-long.
    sample 2 (ref "aaa"): both candidates wrong length is impossible; k=3 right.
    """
    def cand(k, toks, conf, p_k, n):
        return CandidateResult(k=k, token_ids=np.array(toks),
                               confidences=np.array(conf), n_iters=n, p_k=p_k)

    # token id 0 renders as "a"
    s1 = ("aa", [cand(2, [0, 0], [0.99, 0.99], 0.5, 2),
                 cand(3, [0, 0, 0], [0.90, 0.90, 0.90], 0.5, 1)])
    s2 = ("aaa", [cand(2, [0, 0], [0.80, 0.80], 0.4, 1),
                  cand(3, [0, 0, 0], [0.95, 0.95, 0.95], 0.6, 2)])
    return [s1, s2]


class TestGridSearch:
    def test_grid_values(self):
        assert GRID_VALUES == (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)

    def test_full_grid_shape_and_cells(self):
        cached = cached_candidates()
        res = grid_search_rerank(cached)
        assert res.wer.shape == (11, 11)
        assert res.lams == GRID_VALUES and res.betas == GRID_VALUES
        # every cell must equal a fresh rerank at that setting
        for i in (0, 4, 10):
            for j in (0, 7):
                w, _ = corpus_wer(rerank_cached(cached, GRID_VALUES[i], GRID_VALUES[j]))
                assert res.wer[i, j] == pytest.approx(w)

    def test_lam_beta_zero_cell_is_confidence_only(self):
        cached = cached_candidates()
        res = grid_search_rerank(cached)
        w, _ = corpus_wer(rerank_cached(cached, 0.0, 0.0))
        assert res.wer[0, 0] == pytest.approx(w)

    def test_beta_changes_selection(self):
        cached = cached_candidates()[:1]
        hyp_b0 = rerank_cached(cached, 0.0, 0.0)[0][1]
        hyp_b1 = rerank_cached(cached, 0.0, 1.0)[0][1]
        assert hyp_b0 == "aa"   # confidence product favors the k=2 candidate
        assert hyp_b1 == "aaa"  # heavy iteration penalty flips to 1-iter k=3

    def test_tie_break_smallest_lam_then_beta(self):
        # single candidate per sample: the whole grid is one flat WER value
        cand = CandidateResult(k=2, token_ids=np.array([0, 0]),
                               confidences=np.array([0.9, 0.9]), n_iters=2, p_k=0.5)
        res = grid_search_rerank([("aa", [cand])])
        assert (res.wer == res.wer[0, 0]).all()
        assert res.best_lam == 0.0 and res.best_beta == 0.0

    def test_sample_order_invariance(self):
        a = grid_search_rerank(cached_candidates())
        b = grid_search_rerank(list(reversed(cached_candidates())))
        np.testing.assert_array_equal(a.wer, b.wer)
        assert (a.best_lam, a.best_beta) == (b.best_lam, b.best_beta)

    def test_csv_layout(self, tmp_path):
        res = grid_search_rerank(cached_candidates())
        path = str(tmp_path / "grid.csv")
        res.write_csv(path)
        lines = open(path).read().splitlines()
        assert len(lines) == 12  # header + 11 lambda rows
        assert lines[0].split(",")[1:] == [f"{b:.1f}" for b in GRID_VALUES]
        assert all(len(line.split(",")) == 12 for line in lines)


class TestScenarioRunner:
    def test_block_sweep_values(self):
        assert BLOCK_SWEEP == (1, 2, 4, 8, 16, 32)

    def test_missing_checkpoints_skip_with_warning(self):
        warnings = []
        reports = run_scenarios(None, None, None, [], DecodeConfig(),
                                log=lambda msg, **kw: warnings.append(msg))
        assert reports == []
        assert any("stage1" in w for w in warnings)
        assert any("stage2" in w for w in warnings)

    def test_untrained_model_rows(self):
        params = init_denoiser(
            DenoiserConfig(canvas_len=32, vocab=30, d_model=32, n_blocks=1,
                           n_heads=2, ff=64),
            seed=0,
        )
        samples = generate_split("t", 2, ChannelConfig(), seed=8, max_chars=31)
        warnings = []
        reports = run_scenarios(None, params, None, samples, DecodeConfig(),
                                log=lambda msg, **kw: warnings.append(msg))
        names = [r.scenario for r in reports]
        assert names == ["stage2_oracle", "stage2_implicit"]
        assert any("rerank" in w for w in warnings)  # no length predictor
        assert all(r.n_samples == 2 for r in reports)

    def test_report_line_and_csv(self, tmp_path):
        r = EvalReport("demo", 12.5, EditCounts(1, 0, 0, 8), 4, rtf=0.25)
        line = r.line()
        assert "demo" in line and "12.50" in line and "RTF 0.250" in line
        path = str(tmp_path / "reports.csv")
        write_reports_csv([r], path)
        lines = open(path).read().splitlines()
        assert lines[0].startswith("scenario,wer,")
        assert lines[1] == "demo,12.5000,1,0,0,8,4,0.2500"


class TestTraceRendering:
    def test_render_glyphs(self):
        space = TokenSpace(27)
        ids = [0, 1, space.eos_id, space.pad_id, space.mask_id]
        assert render_canvas(ids, space) == "ab#._"

    def test_emit_trace_file(self, tmp_path):
        # table-driven decode on a 4-cell canvas, then render its trace
        from visemedec.model import DenoiserConfig as DC, init_denoiser as init

        params = init(DC(canvas_len=4, vocab=6, d_model=8, n_blocks=1,
                         n_heads=2, ff=16, feat_dim=6, max_cond_len=8), seed=0)
        space = TokenSpace(3)
        table = np.full((4, 6), 0.001)
        table[0, 0] = 0.95
        table[1, 1] = 0.7
        table[2, 2] = 0.92
        table[3, 3] = 0.85
        res = decode_implicit(params, None, DecodeConfig(threshold=0.9),
                              probs_fn=lambda state: table.copy())
        sample = Sample("demo-000", "ab", VisemeClip(np.zeros(4, dtype=np.int64)), 2)
        path = str(tmp_path / "trace.txt")
        emit_trace(sample, [space.mask_id] * 4, res.outcome.trace, space, path)
        lines = open(path).read().splitlines()
        iter_lines = [l for l in lines if l.startswith("iter")]
        assert iter_lines[0].endswith("____")  # everything masked at start
        assert "_" not in iter_lines[-1].split("|")[1]  # fully committed
        committed = [sum(ch != "_" for ch in l.split("|")[1].strip())
                     for l in iter_lines]
        assert committed == sorted(committed) and len(set(committed)) == len(committed)
        assert any(":0." in l for l in iter_lines[1:])  # confidences present
