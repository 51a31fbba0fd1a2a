"""Canvas layout, two-stage supervision sets, forward masking, Eq-style loss."""

import math

import numpy as np
import pytest

from visemedec.canvas import (
    Canvas,
    LengthError,
    MaskDraw,
    Role,
    TokenSpace,
    VocabError,
    apply_forward_mask,
    build_clean_canvas,
    denoise_loss,
    sample_mask_positions,
    supervision_set,
    unmask,
)
from visemedec.nncore import Tensor
from visemedec.rng import substream

SPACE = TokenSpace(27)


def logits_with_target_probs(space, targets, probs):
    """Rows whose softmax puts exactly `probs[i]` on `targets[i]`.

    Remaining mass is spread uniformly over the other vocab entries, which
    pins the masked-position term of the loss without a model in the loop.
    """
    V = space.vocab_size
    rows = []
    for tgt, p in zip(targets, probs):
        rest = (1.0 - p) / (V - 1)
        row = np.full(V, math.log(rest))
        row[tgt] = math.log(p)
        rows.append(row)
    return Tensor(np.array(rows))


class TestTokenSpace:
    def test_reserved_ids_distinct_and_after_text(self):
        assert SPACE.eos_id == 27
        assert SPACE.pad_id == 28
        assert SPACE.mask_id == 29
        assert SPACE.vocab_size == 30
        assert len({SPACE.eos_id, SPACE.pad_id, SPACE.mask_id}) == 3

    def test_role_of(self):
        assert SPACE.role_of(0) is Role.TEXT
        assert SPACE.role_of(26) is Role.TEXT
        assert SPACE.role_of(27) is Role.EOS
        assert SPACE.role_of(28) is Role.PAD
        assert SPACE.role_of(29) is Role.MASK

    def test_role_of_out_of_range(self):
        with pytest.raises(VocabError):
            SPACE.role_of(30)
        with pytest.raises(VocabError):
            SPACE.role_of(-1)


class TestCleanCanvasLayout:
    def test_two_token_example(self):
        c = build_clean_canvas([5, 7], T=6, space=SPACE)
        expected = [5, 7, SPACE.eos_id, SPACE.pad_id, SPACE.pad_id, SPACE.pad_id]
        assert c.ids.tolist() == expected
        assert c.k == 2

    def test_max_length_has_no_pad(self):
        c = build_clean_canvas(list(range(5)), T=6, space=SPACE)
        assert c.ids.tolist() == [0, 1, 2, 3, 4, SPACE.eos_id]
        assert Role.PAD not in c.roles()

    def test_empty_transcript_rejected(self):
        with pytest.raises(LengthError):
            build_clean_canvas([], T=6, space=SPACE)

    def test_too_long_rejected(self):
        with pytest.raises(LengthError):
            build_clean_canvas(list(range(6)), T=6, space=SPACE)

    def test_reserved_id_rejected(self):
        with pytest.raises(VocabError):
            build_clean_canvas([5, SPACE.eos_id], T=6, space=SPACE)


class TestSupervisionSet:
    def test_stage1_covers_text_and_eos(self):
        c = build_clean_canvas([3, 4], T=6, space=SPACE)
        # first K+1 cells: the transcript plus its EOS, nothing else
        assert supervision_set(c, stage=1).tolist() == [0, 1, 2]

    def test_stage2_covers_whole_canvas(self):
        c = build_clean_canvas([3, 4], T=6, space=SPACE)
        assert supervision_set(c, stage=2).tolist() == [0, 1, 2, 3, 4, 5]

    def test_stages_agree_when_no_pad(self):
        c = build_clean_canvas(list(range(5)), T=6, space=SPACE)
        assert supervision_set(c, 1).tolist() == supervision_set(c, 2).tolist()

    def test_requires_known_k(self):
        c = Canvas(np.full(6, SPACE.mask_id), SPACE)
        with pytest.raises(LengthError):
            supervision_set(c, 1)

    def test_bad_stage(self):
        c = build_clean_canvas([3], T=6, space=SPACE)
        with pytest.raises(ValueError):
            supervision_set(c, 3)


class TestForwardMask:
    def test_t_near_one_masks_everything(self):
        eligible = np.arange(8)
        rng = np.random.default_rng(0)
        pos = sample_mask_positions(eligible, t=1.0, rng=rng)
        assert pos.tolist() == eligible.tolist()

    def test_t_near_zero_forces_one(self):
        eligible = np.arange(8)
        rng = np.random.default_rng(0)
        pos = sample_mask_positions(eligible, t=1e-12, rng=rng)
        assert pos.size == 1
        assert pos[0] in eligible

    def test_draw_never_empty(self):
        c = build_clean_canvas([1, 2, 3], T=8, space=SPACE)
        rng = substream(11, "mask")
        for _ in range(200):
            _, draw = apply_forward_mask(c, stage=2, rng=rng)
            assert draw.positions.size >= 1
            assert 0.0 < draw.t <= 1.0

    def test_stage1_never_masks_pad(self):
        c = build_clean_canvas([1, 2, 3], T=8, space=SPACE)
        pad_cells = set(range(4, 8))
        rng = substream(12, "mask")
        for _ in range(300):
            noisy, draw = apply_forward_mask(c, stage=1, rng=rng)
            assert not pad_cells & set(draw.positions.tolist())
            # cells outside the draw keep their clean tokens
            untouched = np.setdiff1d(np.arange(8), draw.positions)
            assert (noisy.ids[untouched] == c.ids[untouched]).all()
            assert (noisy.ids[draw.positions] == SPACE.mask_id).all()

    def test_mask_fraction_matches_t(self):
        # Monte-Carlo pin: Bernoulli(0.3) over 10 cells x 1e4 draws
        eligible = np.arange(10)
        rng = substream(13, "mask-frac")
        total = 0
        draws = 10_000
        for _ in range(draws):
            total += sample_mask_positions(eligible, t=0.3, rng=rng).size
        frac = total / (draws * eligible.size)
        assert abs(frac - 0.30) < 0.01

    def test_unmask_round_trip(self):
        c = build_clean_canvas([4, 5, 6, 7], T=8, space=SPACE)
        rng = substream(14, "mask")
        noisy, draw = apply_forward_mask(c, stage=2, rng=rng)
        restored = unmask(noisy, c, draw.positions)
        assert (restored.ids == c.ids).all()


class TestDenoiseLoss:
    def test_fixed_example(self):
        # two masked cells at t=0.5 with target probs 0.5 and 0.25:
        # 2 * (ln 2 + ln 4) = 4.1589
        c = build_clean_canvas([5, 7], T=6, space=SPACE)
        logits = logits_with_target_probs(
            SPACE, targets=c.ids.tolist(), probs=[0.5, 0.25, 0.9, 0.9, 0.9, 0.9]
        )
        draw = MaskDraw(t=0.5, positions=np.array([0, 1]))
        loss = denoise_loss(logits, c, draw)
        assert loss.data == pytest.approx(4.1589, abs=1e-3)

    def test_certain_model_scores_zero(self):
        c = build_clean_canvas([5, 7], T=6, space=SPACE)
        onehot = np.full((6, SPACE.vocab_size), -1e4)
        onehot[np.arange(6), c.ids] = 1e4
        draw = MaskDraw(t=0.5, positions=np.array([0, 1, 3]))
        loss = denoise_loss(Tensor(onehot), c, draw)
        assert loss.data == pytest.approx(0.0, abs=1e-8)

    def test_loss_nonnegative(self):
        c = build_clean_canvas([5, 7], T=6, space=SPACE)
        rng = substream(15, "loss")
        for _ in range(20):
            logits = Tensor(rng.normal(size=(6, SPACE.vocab_size)))
            draw = MaskDraw(t=0.7, positions=np.array([0, 2]))
            assert denoise_loss(logits, c, draw).data >= 0.0

    def test_doubling_t_halves_loss(self):
        c = build_clean_canvas([5, 7], T=6, space=SPACE)
        logits = logits_with_target_probs(SPACE, c.ids.tolist(), [0.5] * 6)
        pos = np.array([0, 1])
        a = denoise_loss(logits, c, MaskDraw(t=0.25, positions=pos)).data
        b = denoise_loss(logits, c, MaskDraw(t=0.5, positions=pos)).data
        assert a == pytest.approx(2.0 * b, rel=1e-9)

    def test_strictly_decreasing_in_t(self):
        c = build_clean_canvas([5, 7], T=6, space=SPACE)
        logits = logits_with_target_probs(SPACE, c.ids.tolist(), [0.5] * 6)
        pos = np.array([0, 1])
        vals = [
            denoise_loss(logits, c, MaskDraw(t=t, positions=pos)).data
            for t in (0.1, 0.3, 0.5, 0.8, 1.0)
        ]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_rejects_bad_draws(self):
        c = build_clean_canvas([5, 7], T=6, space=SPACE)
        logits = logits_with_target_probs(SPACE, c.ids.tolist(), [0.5] * 6)
        with pytest.raises(ValueError):
            denoise_loss(logits, c, MaskDraw(t=0.0, positions=np.array([0])))
        with pytest.raises(ValueError):
            denoise_loss(logits, c, MaskDraw(t=0.5, positions=np.array([], dtype=np.int64)))

    def test_rejects_row_mismatch(self):
        c = build_clean_canvas([5, 7], T=6, space=SPACE)
        logits = Tensor(np.zeros((5, SPACE.vocab_size)))
        with pytest.raises(LengthError):
            denoise_loss(logits, c, MaskDraw(t=0.5, positions=np.array([0])))
