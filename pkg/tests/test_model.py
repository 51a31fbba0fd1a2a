"""Denoiser/length-predictor forwards, conditioning encoder, checkpoints."""

import numpy as np
import pytest

from visemedec.canvas import Canvas, TokenSpace, build_clean_canvas
from visemedec.model import (
    CheckpointManifestError,
    CheckpointPayloadError,
    CheckpointShapeError,
    DenoiserConfig,
    LengthPosterior,
    LengthPredictorConfig,
    count_params,
    denoiser_forward,
    denoiser_probs,
    encode_clip,
    init_denoiser,
    init_length_predictor,
    length_forward,
    load_checkpoint,
    save_checkpoint,
)
from visemedec.nncore import ConfigError
from visemedec.rng import substream
from visemedec.synthdata import ChannelConfig, VisemeClip, generate_split

# small-footprint config shared by the fast tests
CFG = DenoiserConfig(canvas_len=8, vocab=12, d_model=16, n_blocks=2,
                     n_heads=2, ff=32, feat_dim=6, max_cond_len=8)
SPACE = TokenSpace(9)  # 9 text ids + EOS/PAD/MASK = vocab 12


def tiny_cond(n_frames=6, n_classes=3, seed=0):
    rng = substream(seed, "tiny-cond")
    return encode_clip(VisemeClip(rng.integers(0, n_classes, size=n_frames)),
                       n_classes=n_classes)


def all_masked(space=SPACE, T=8):
    return Canvas(np.full(T, space.mask_id, dtype=np.int64), space)


class TestEncodeClip:
    def test_even_clip_shape(self):
        cond = encode_clip(VisemeClip(np.array([0, 1, 2, 3])))
        assert cond.features.shape == (2, 24)
        assert cond.n_frames == 4

    def test_odd_tail_zero_padded(self):
        cond = encode_clip(VisemeClip(np.array([0, 1, 2])))
        assert cond.features.shape == (2, 24)
        # last row holds frame 2 in its first half and zeros after
        assert cond.features[1, 2] == 1.0
        assert (cond.features[1, 12:] == 0.0).all()

    def test_rows_are_one_hot_pairs(self):
        cond = encode_clip(VisemeClip(np.array([5, 7])))
        row = cond.features[0]
        assert row.sum() == 2.0
        assert row[5] == 1.0 and row[12 + 7] == 1.0

    def test_duration(self):
        cond = encode_clip(VisemeClip(np.zeros(50, dtype=np.int64)))
        assert cond.duration == pytest.approx(2.0)

    def test_rejects_empty_and_out_of_range(self):
        with pytest.raises(ValueError):
            encode_clip(VisemeClip(np.array([], dtype=np.int64)))
        with pytest.raises(ValueError):
            encode_clip(VisemeClip(np.array([12])))


class TestDenoiserForward:
    def test_deterministic_and_shaped(self):
        params = init_denoiser(CFG, seed=3)
        cond = tiny_cond()
        a = denoiser_forward(params, all_masked(), cond).data
        b = denoiser_forward(params, all_masked(), cond).data
        assert a.tobytes() == b.tobytes()
        assert a.shape == (8, 12)

    def test_shape_fixed_regardless_of_masking(self):
        params = init_denoiser(CFG, seed=3)
        cond = tiny_cond()
        clean = build_clean_canvas([3, 1, 4], T=8, space=SPACE)
        out = denoiser_forward(params, clean, cond)
        assert out.shape == (8, 12)

    def test_bidirectional_text_cell(self):
        # flipping a committed cell moves logits at a *different* position
        params = init_denoiser(CFG, seed=3)
        cond = tiny_cond()
        c1 = all_masked()
        c2 = all_masked()
        c1.ids[5] = 2
        c2.ids[5] = 7
        a = denoiser_forward(params, c1, cond).data
        b = denoiser_forward(params, c2, cond).data
        assert not np.allclose(a[0], b[0])

    def test_bidirectional_pad_cell(self):
        # no causal mask: a PAD beyond the EOS still influences earlier cells
        params = init_denoiser(CFG, seed=3)
        cond = tiny_cond()
        base = build_clean_canvas([3, 1, 4], T=8, space=SPACE)
        pert = base.copy()
        pert.ids[7] = SPACE.mask_id
        a = denoiser_forward(params, base, cond).data
        b = denoiser_forward(params, pert, cond).data
        assert not np.allclose(a[0], b[0])

    def test_length_mismatch_rejected(self):
        params = init_denoiser(CFG, seed=3)
        with pytest.raises(ConfigError):
            denoiser_forward(params, all_masked(T=7), tiny_cond())

    def test_cond_overflow_rejected(self):
        params = init_denoiser(CFG, seed=3)
        with pytest.raises(ConfigError):
            denoiser_forward(params, all_masked(), tiny_cond(n_frames=20))

    def test_probs_normalized(self):
        params = init_denoiser(CFG, seed=3)
        probs = denoiser_probs(params, all_masked(), tiny_cond())
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-5)
        assert (probs >= 0).all()


class TestLengthPredictor:
    def test_param_count_near_4m(self):
        lp = init_length_predictor(LengthPredictorConfig(), seed=0)
        assert 3_000_000 <= count_params(lp) <= 5_000_000

    def test_posterior_sums_to_one(self):
        cfg = LengthPredictorConfig(k_max=7, d_model=12, n_blocks=1, n_heads=2,
                                    ff=24, feat_dim=6, max_cond_len=8)
        lp = init_length_predictor(cfg, seed=1)
        post = length_forward(lp, tiny_cond())
        assert post.probs.sum() == pytest.approx(1.0, abs=1e-6)
        assert post.k_max == 7
        assert 1 <= post.k_pred <= 7

    def test_argmax_tie_breaks_low(self):
        post = LengthPosterior(probs=np.array([0.2, 0.3, 0.3, 0.2]))
        assert post.k_pred == 2

    def test_p_of_out_of_range_is_zero(self):
        post = LengthPosterior(probs=np.array([0.5, 0.5]))
        assert post.p_of(0) == 0.0
        assert post.p_of(3) == 0.0
        assert post.p_of(1) == 0.5

    def test_untrained_accuracy_is_chance_level(self):
        # an untrained predictor cannot beat the best label-histogram guess
        samples = generate_split("val", 200, ChannelConfig(), seed=99, max_chars=31)
        ks = np.array([s.k for s in samples])
        ceiling = max(np.mean(np.abs(ks - g) <= 5) for g in range(1, 32)) * 100
        lp = init_length_predictor(LengthPredictorConfig(), seed=0)
        preds = np.array([length_forward(lp, encode_clip(s.clip)).k_pred
                          for s in samples])
        acc5 = np.mean(np.abs(preds - ks) <= 5) * 100
        assert acc5 <= ceiling + 2.0
        assert acc5 < 99.0

    def test_cond_overflow_rejected(self):
        cfg = LengthPredictorConfig(k_max=7, d_model=12, n_blocks=1, n_heads=2,
                                    ff=24, feat_dim=6, max_cond_len=4)
        lp = init_length_predictor(cfg, seed=1)
        with pytest.raises(ConfigError):
            length_forward(lp, tiny_cond(n_frames=12))


class TestCheckpoints:
    def test_save_load_save_byte_identical(self, tmp_path):
        params = init_denoiser(CFG, seed=3)
        p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
        save_checkpoint(params, p1)
        save_checkpoint(load_checkpoint(p1), p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_values_and_meta_round_trip(self, tmp_path):
        params = init_denoiser(CFG, seed=3)
        params.meta["trained_stage"] = "1"
        path = str(tmp_path / "m.ckpt")
        save_checkpoint(params, path)
        loaded = load_checkpoint(path)
        assert loaded.meta["trained_stage"] == "1"
        for name in params.names():
            assert (loaded[name].data == params[name].data).all()

    def test_stage1_checkpoint_initializes_stage2(self, tmp_path):
        # same parameter names: a stage-1 file loads cleanly as a stage-2 init
        params = init_denoiser(CFG, seed=3)
        params.meta["trained_stage"] = "1"
        path = str(tmp_path / "s1.ckpt")
        save_checkpoint(params, path)
        loaded = load_checkpoint(path)
        assert set(loaded.names()) == set(params.names())

    def test_lp_round_trip(self, tmp_path):
        cfg = LengthPredictorConfig(k_max=7, d_model=12, n_blocks=1, n_heads=2,
                                    ff=24, feat_dim=6, max_cond_len=8)
        lp = init_length_predictor(cfg, seed=1)
        path = str(tmp_path / "lp.ckpt")
        save_checkpoint(lp, path)
        loaded = load_checkpoint(path)
        post_a = length_forward(lp, tiny_cond())
        post_b = length_forward(loaded, tiny_cond())
        np.testing.assert_array_equal(post_a.probs, post_b.probs)

    def test_unknown_parameter_name_rejected(self, tmp_path):
        params = init_denoiser(CFG, seed=3)
        path = str(tmp_path / "c.ckpt")
        save_checkpoint(params, path)
        blob = open(path, "rb").read()
        blob = blob.replace(b"tensor tok_emb ", b"tensor tok_embX ")
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(blob)
        with pytest.raises(CheckpointManifestError):
            load_checkpoint(str(bad))

    def test_shape_mismatch_rejected(self, tmp_path):
        params = init_denoiser(CFG, seed=3)
        path = str(tmp_path / "c.ckpt")
        save_checkpoint(params, path)
        blob = open(path, "rb").read()
        blob = blob.replace(b"tensor tok_emb 12,16 ", b"tensor tok_emb 16,12 ")
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(blob)
        with pytest.raises(CheckpointShapeError):
            load_checkpoint(str(bad))

    def test_truncated_payload_rejected(self, tmp_path):
        params = init_denoiser(CFG, seed=3)
        path = str(tmp_path / "c.ckpt")
        save_checkpoint(params, path)
        blob = open(path, "rb").read()
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(blob[:-16])
        with pytest.raises(CheckpointPayloadError):
            load_checkpoint(str(bad))

    def test_garbage_file_rejected(self, tmp_path):
        bad = tmp_path / "junk.ckpt"
        bad.write_bytes(b"not a checkpoint at all\n")
        with pytest.raises(CheckpointManifestError):
            load_checkpoint(str(bad))
