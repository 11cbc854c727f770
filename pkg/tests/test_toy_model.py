import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fixtures.regenerate import SEED, golden_arrays, read_golden_csv
from oracle import naive_forward

from cof import toy_model as tm
from cof.attention import ReweightParams, ShapeError, mask_to_columns
from cof.geometry import NormBox, PatchGrid, TokenMask, box_to_mask
from cof.grounding import CoordConvention, NoBoxFound
from cof.harness import generate_suite

FIXTURES = Path(__file__).parent / "fixtures"
WEIGHTS = tm.build_toy_model(0)
SUITE = generate_suite(7, 40, existence_fraction=0.25)


def target_columns(task, seq):
    return mask_to_columns(box_to_mask(task.image.target_rect(), task.image.grid), seq.layout)


def blank_image(rows=2, cols=2, target=(0, 0)):
    return tm.SyntheticImage(PatchGrid(rows, cols), np.zeros((rows * cols, tm.D_FEATURE)), target)


class TestImage:
    def test_target_outside(self):
        with pytest.raises(ValueError):
            blank_image(target=(2, 0))

    def test_target_is_distractor(self):
        with pytest.raises(ValueError):
            tm.SyntheticImage(PatchGrid(2, 2), np.zeros((4, tm.D_FEATURE)), (0, 0), ((0, 0),))

    def test_feature_rows(self):
        with pytest.raises(ShapeError):
            tm.SyntheticImage(PatchGrid(2, 2), np.zeros((3, tm.D_FEATURE)), (0, 0))

    def test_pixel_size(self):
        img = blank_image(2, 3)
        assert (img.width, img.height) == (3 * img.patch_px, 2 * img.patch_px)
        assert img.target_rect() == NormBox(0.0, 0.0, 1 / 3, 0.5)


class TestEncoder:
    def test_zero_features(self):
        assert not tm.encode_image(blank_image(), WEIGHTS).any()
        assert tm.encode_image(blank_image(), WEIGHTS).shape[0] == 4

    def test_dimension_mismatch(self):
        img = tm.SyntheticImage(PatchGrid(1, 1), np.zeros((1, 3)), (0, 0))
        with pytest.raises(ShapeError):
            tm.encode_image(img, WEIGHTS)

    def test_identity_projector(self):
        x = np.random.default_rng(0).normal(size=(5, 7))
        np.testing.assert_array_equal(tm.project(x, tm.Projector.identity(7)), x)

    def test_zero_input_gives_bias(self):
        out = tm.project(np.zeros((3, 24)), WEIGHTS.projector)
        np.testing.assert_array_equal(out, np.tile(WEIGHTS.projector.bias, (3, 1)))

    def test_projector_mismatch(self):
        with pytest.raises(ShapeError):
            tm.project(np.zeros((2, 5)), WEIGHTS.projector)


@pytest.mark.parametrize("name", ["encode", "visual_tokens", "logits"])
def test_golden_fixture(name):
    header, frozen = read_golden_csv(FIXTURES / f"{name}_seed{SEED}.csv")
    assert header.startswith(f"# seed={SEED} ")
    current = np.atleast_2d(golden_arrays()[name])
    assert current.shape == frozen.shape
    np.testing.assert_allclose(current, frozen, rtol=0, atol=1e-12)


class TestWeights:
    def test_same_seed_same_model(self):
        a, b = tm.build_toy_model(3), tm.build_toy_model(3)
        assert a.fingerprint() == b.fingerprint()
        task = SUITE[0]
        la = tm.decode_step(tm.build_sequence(task.image, task.question, a), a)
        lb = tm.decode_step(tm.build_sequence(task.image, task.question, b), b)
        assert np.array_equal(la, lb)

    def test_seed_changes_model(self):
        assert tm.build_toy_model(1).fingerprint() != tm.build_toy_model(2).fingerprint()

    def test_size(self):
        assert (WEIGHTS.n_layers, WEIGHTS.n_heads, WEIGHTS.d_model) == (2, 4, 64)
        assert len(WEIGHTS.vocab) <= 64

    def test_structured_model_matches_loop_oracle(self):
        task = SUITE[1]
        seq = tm.build_sequence(task.image, task.question, WEIGHTS)
        cols = target_columns(task, seq)
        trace = tm.forward(seq, WEIGHTS, ReweightParams(4.5, cols))
        logits, probs = naive_forward(seq.embeddings().tolist(), WEIGHTS, 4.5, frozenset(np.flatnonzero(cols).tolist()))
        np.testing.assert_allclose(trace.logits, logits, rtol=0, atol=1e-10)
        for li, layer_probs in enumerate(probs):
            np.testing.assert_allclose(trace.attentions[li], np.array(layer_probs), rtol=0, atol=1e-10)


class TestTokenizer:
    def test_unknown_words(self):
        ids = tm.tokenize("What colour is the STAR?", WEIGHTS)
        words = [WEIGHTS.vocab[i] for i in ids]
        assert words == ["what", "<unk>", "is", "the", "star", "?"]

    def test_empty_prompt(self):
        with pytest.raises(ValueError):
            tm.build_sequence(blank_image(), "...", WEIGHTS)

    def test_layout(self):
        seq = tm.build_sequence(blank_image(2, 3), "what color", WEIGHTS)
        assert (seq.layout.n_visual, seq.layout.n_total) == (6, 8)


class TestDecoding:
    def test_lambda_one_logits_identical(self):
        task = SUITE[2]
        seq = tm.build_sequence(task.image, task.question, WEIGHTS)
        plain = tm.decode_step(seq, WEIGHTS)
        same = tm.decode_step(seq, WEIGHTS, ReweightParams(1.0, target_columns(task, seq)))
        assert np.max(np.abs(plain - same)) == 0.0

    def test_target_mass_rises_in_every_layer_and_head(self):
        task = generate_suite(SEED, 1)[0]
        seq = tm.build_sequence(task.image, task.question, WEIGHTS)
        cols = target_columns(task, seq)
        base = tm.forward(seq, WEIGHTS).attentions
        boosted = tm.forward(seq, WEIGHTS, ReweightParams(4.5, cols)).attentions
        for a, b in zip(base, boosted):
            assert np.all(b[:, -1, cols].sum(-1) > a[:, -1, cols].sum(-1))

    def test_boost_flips_distractor_answer(self):
        task = generate_suite(SEED, 1)[0]
        seq = tm.build_sequence(task.image, task.question, WEIGHTS)
        assert tm.generate(seq, WEIGHTS) != task.gold_answer
        assert tm.generate(seq, WEIGHTS, ReweightParams(4.5, target_columns(task, seq))) == task.gold_answer

    @pytest.mark.parametrize("task", SUITE[:10], ids=lambda t: t.task_id)
    def test_lambda_one_generation_identical(self, task):
        seq = tm.build_sequence(task.image, task.question, WEIGHTS)
        plain = tm.generate_trace(seq, WEIGHTS)
        same = tm.generate_trace(seq, WEIGHTS, ReweightParams(1.0, target_columns(task, seq)))
        assert plain.tokens == same.tokens

    @pytest.mark.parametrize("layer_range", [(0, 0), (2, 2), (5, 9)])
    def test_empty_layer_range_is_baseline(self, layer_range):
        task = SUITE[3]
        seq = tm.build_sequence(task.image, task.question, WEIGHTS)
        plain = tm.forward(seq, WEIGHTS)
        scoped = tm.forward(seq, WEIGHTS, ReweightParams(22.0, target_columns(task, seq)), layer_range)
        assert np.array_equal(plain.logits, scoped.logits)

    def test_layer_range_limits_effect(self):
        task = SUITE[3]
        seq = tm.build_sequence(task.image, task.question, WEIGHTS)
        plain = tm.forward(seq, WEIGHTS).attentions
        scoped = tm.forward(seq, WEIGHTS, ReweightParams(22.0, target_columns(task, seq)), (1, 2)).attentions
        assert np.array_equal(plain[0], scoped[0])
        assert not np.array_equal(plain[1], scoped[1])

    def test_greedy_stops_at_eos(self):
        task = SUITE[0]
        trace = tm.generate_trace(tm.build_sequence(task.image, task.question, WEIGHTS), WEIGHTS, max_tokens=4)
        assert trace.tokens[-1] == tm.EOS and len(trace.tokens) == 2
        assert trace.text == trace.tokens[0]

    def test_max_tokens(self):
        seq = tm.build_sequence(SUITE[0].image, SUITE[0].question, WEIGHTS)
        assert len(tm.generate_trace(seq, WEIGHTS, max_tokens=1).tokens) == 1
        with pytest.raises(ValueError):
            tm.generate(seq, WEIGHTS, max_tokens=0)

    def test_forward_shape_check(self):
        other = tm.random_weights(0, d_model=32, n_heads=4)
        seq = tm.build_sequence(SUITE[0].image, SUITE[0].question, WEIGHTS)
        with pytest.raises(ShapeError):
            tm.forward(seq, other)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, len(SUITE) - 1), st.floats(1.0, 30.0), st.floats(1.0, 30.0), st.booleans())
    def test_mass_monotone_in_lambda(self, idx, l1, l2, full):
        task = SUITE[idx]
        seq = tm.build_sequence(task.image, task.question, WEIGHTS)
        mask = TokenMask.full(task.image.grid) if full else box_to_mask(task.image.target_rect(), task.image.grid)
        cols = mask_to_columns(mask, seq.layout)
        lo, hi = sorted((l1, l2))
        m_lo = [a[..., cols].sum(-1) for a in tm.forward(seq, WEIGHTS, ReweightParams(lo, cols)).attentions]
        m_hi = [a[..., cols].sum(-1) for a in tm.forward(seq, WEIGHTS, ReweightParams(hi, cols)).attentions]
        for a, b in zip(m_lo, m_hi):
            assert np.all(b >= a - 1e-12)
            if hi > lo:
                interior = (a > 1e-9) & (a < 1 - 1e-9)
                assert np.all(b[interior] > a[interior])


class TestGroundingStub:
    def test_zero_noise_text(self):
        img = tm.SyntheticImage(PatchGrid(4, 4), np.zeros((16, tm.D_FEATURE)), (1, 1))
        assert tm.toy_ground_text(img, "q") == '{"bbox": [0.25, 0.25, 0.5, 0.5]}'
        r = tm.toy_ground(img, "What color is the star?")
        assert r.parsed_box == img.target_rect()
        assert r.coord_convention is CoordConvention.NORMALIZED_UNIT

    def test_offset(self):
        img = tm.SyntheticImage(PatchGrid(4, 4), np.zeros((16, tm.D_FEATURE)), (1, 1))
        box = tm.toy_ground(img, "q?", noise=tm.GroundingNoise(dx=0.1)).parsed_box
        assert box.as_tuple() == pytest.approx((0.35, 0.25, 0.6, 0.5), abs=1e-12)

    def test_scale_is_clipped_to_image(self):
        img = tm.SyntheticImage(PatchGrid(2, 2), np.zeros((4, tm.D_FEATURE)), (0, 0))
        coords = json.loads(tm.toy_ground_text(img, "q", tm.GroundingNoise(scale=3.0)))["bbox"]
        assert coords == [0.0, 0.0, 1.0, 1.0]

    def test_refusal(self):
        r = tm.toy_ground(blank_image(), "q?", noise=tm.GroundingNoise(refusal=True))
        assert r.parsed_box is None and isinstance(r.error, NoBoxFound)

    @given(st.integers(1, 8), st.integers(1, 8), st.data())
    def test_zero_noise_is_exact_rect(self, rows, cols, data):
        target = (data.draw(st.integers(0, rows - 1)), data.draw(st.integers(0, cols - 1)))
        img = tm.SyntheticImage(PatchGrid(rows, cols), np.zeros((rows * cols, tm.D_FEATURE)), target)
        assert tm.toy_ground(img, "q?").parsed_box == img.target_rect()
