import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cocobert.data import (DatasetError, SyntheticSpec, VideoSentencePair, collate, frame_tokens,
                           generate_synthetic, mask_frames, mask_tokens, nearest_prototype_accuracy,
                           read_dataset, synthetic_world, write_dataset)
from cocobert.nn import CLS_ID, MASK_ID, PAD_ID, SEP_ID, SPECIAL_IDS

from conftest import tiny_spec


# -- masking ---------------------------------------------------------------------


def test_p0_forces_one_mask(rng):
    toks = frame_tokens([5, 6, 7, 8])
    out, pos = mask_tokens(toks, 0.0, rng)
    assert pos.size == 1 and 1 <= pos[0] <= 4
    assert mask_frames(7, 0.0, rng).size == 1


def test_p1_masks_whole_body(rng):
    toks = frame_tokens([5, 6, 7])
    out, pos = mask_tokens(toks, 1.0, rng)
    assert out.tolist() == [CLS_ID, MASK_ID, MASK_ID, MASK_ID, SEP_ID]
    np.testing.assert_array_equal(mask_frames(4, 1.0, rng), np.arange(4))


def test_no_force_allows_zero(rng):
    assert mask_tokens(frame_tokens([5]), 0.0, rng, force=False)[1].size == 0


def test_masking_rate_within_binomial_interval():
    rng = np.random.default_rng(0)
    toks = frame_tokens(np.full(10**5, 9))
    _, pos = mask_tokens(toks, 0.15, rng, force=False)
    assert 0.147 <= pos.size / 1e5 <= 0.153
    rate = mask_frames(10**5, 0.15, np.random.default_rng(1), force=False).size / 1e5
    assert 0.147 <= rate <= 0.153


@given(st.lists(st.integers(0, 15), min_size=1, max_size=20), st.floats(0, 1), st.integers(0, 2**31))
def test_specials_never_masked(ids, p, seed):
    toks = np.array(ids)
    out, pos = mask_tokens(toks, p, np.random.default_rng(seed))
    assert not np.isin(toks[pos], SPECIAL_IDS).any()
    keep = np.ones(toks.size, bool)
    keep[pos] = False
    np.testing.assert_array_equal(out[keep], toks[keep])
    assert np.all(out[pos] == MASK_ID)


def test_collate_views_agree_outside_masks(tiny_pairs):
    b = collate(tiny_pairs[:8], np.random.default_rng(5))
    diff = b.tokens != b.masked_tokens
    np.testing.assert_array_equal(diff, b.word_mask)
    assert np.all(b.word_mask.sum(axis=1) >= 1) and np.all(b.frame_mask.sum(axis=1) >= 1)
    assert not np.isin(b.tokens[b.word_mask], SPECIAL_IDS).any()
    for i, x in enumerate(tiny_pairs[:8]):
        n = x.frames.shape[0]
        assert not b.frame_mask[i, n:].any()
        np.testing.assert_array_equal(b.frames[i, :n], x.frames)
        assert b.tokens[i, b.token_lengths[i]:].tolist() == [PAD_ID] * (b.tokens.shape[1] - b.token_lengths[i])
    np.testing.assert_array_equal(b.labels, [x.label for x in tiny_pairs[:8]])


def test_collate_empty_rejected():
    with pytest.raises(DatasetError):
        collate([])


# -- synthetic generator -----------------------------------------------------------


def test_noise_free_concepts_are_pure():
    spec = tiny_spec(n_pairs=60, feature_noise=0.0, token_noise=0.0, word_signal=0.0)
    pairs = generate_synthetic(spec)
    parts = spec.partitions()
    by_c = {}
    for x in pairs:
        assert np.isin(x.tokens, parts[x.label]).all()
        assert np.all(x.frames == x.frames[0])
        by_c.setdefault(x.label, []).append(x.frames[0])
    for rows in by_c.values():
        assert all(np.array_equal(r, rows[0]) for r in rows)


def test_word_signal_ties_frames_to_words():
    spec = tiny_spec(n_pairs=10, feature_noise=0.0)
    world = synthetic_world(spec)
    for x in generate_synthetic(spec):
        np.testing.assert_allclose(x.frames[0], world.clean_frame(x.label, x.tokens, 1.0), atol=1e-14)


def test_same_seed_same_data_different_seed_differs():
    a, b = generate_synthetic(tiny_spec(seed=4)), generate_synthetic(tiny_spec(seed=4))
    assert a == b
    c = generate_synthetic(tiny_spec(seed=5))
    assert any(x != y for x, y in zip(a, c))


def test_concept_counts_multinomial_bound():
    pairs = generate_synthetic(SyntheticSpec(n_pairs=2000, n_concepts=8, seed=0))
    counts = np.bincount([x.label for x in pairs], minlength=8)
    sd = np.sqrt(2000 * (1 / 8) * (7 / 8))
    assert np.all(np.abs(counts - 250) <= 3 * sd)


def test_nearest_prototype_oracle_sees_the_signal():
    spec = SyntheticSpec(n_pairs=500, feature_noise=0.05, word_signal=0.0)
    assert nearest_prototype_accuracy(generate_synthetic(spec), synthetic_world(spec)) >= 0.99


def test_desk_defaults_shapes():
    spec = SyntheticSpec(n_pairs=50)
    for x in generate_synthetic(spec):
        assert x.frames.shape[1] == 32 and 4 <= x.frames.shape[0] <= 12
        assert 3 <= x.tokens.size <= 10 and x.tokens.min() >= 4 and x.tokens.max() < 64


@pytest.mark.parametrize("bad", [dict(n_concepts=0), dict(n_concepts=100), dict(feature_noise=-1.0),
                                 dict(frames_min=5, frames_max=4), dict(token_noise=1.5), dict(n_pairs=-1)])
def test_invalid_spec_rejected(bad):
    with pytest.raises(DatasetError):
        generate_synthetic(SyntheticSpec(**bad))


# -- JSON Lines --------------------------------------------------------------------


def test_empty_file(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text("")
    assert read_dataset(p) == []


def test_round_trip(tmp_path, tiny_pairs):
    p = tmp_path / "d.jsonl"
    assert write_dataset(p, tiny_pairs) == len(tiny_pairs)
    assert read_dataset(p, 16, 6, 6, 6) == tiny_pairs
    raw = p.read_bytes()
    assert b"\r" not in raw and raw.count(b"\n") == len(tiny_pairs)


def test_optional_fields(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text(json.dumps({"frames": [[0.5, 1.0]], "tokens": [4, 5]}) + "\n")
    (x,) = read_dataset(p)
    assert x.label is None and x.id is None


def _write(tmp_path, recs):
    p = tmp_path / "bad.jsonl"
    p.write_text("\n".join(r if isinstance(r, str) else json.dumps(r) for r in recs) + "\n")
    return p


GOOD = {"frames": [[0.0, 1.0]], "tokens": [4]}


@pytest.mark.parametrize("bad, match", [
    ({"frames": [[0.0, 1.0]], "tokens": [16]}, "vocab"),
    ({"frames": [[0.0, 1.0]], "tokens": [CLS_ID]}, "special"),
    ({"frames": [[0.0, 1.0], [1.0]], "tokens": [4]}, "frame"),
    ({"frames": [[0.0, 1.0, 2.0]], "tokens": [4]}, "width"),
    ({"frames": [], "tokens": [4]}, "frame"),
    ({"frames": [[0.0, 1.0]], "tokens": []}, "token"),
    ({"frames": [[0.0, 1.0]], "tokens": [4], "label": "x"}, "label"),
    ("{not json", "JSON"),
])
def test_bad_records_name_the_line(tmp_path, bad, match):
    p = _write(tmp_path, [GOOD, bad])
    with pytest.raises(DatasetError, match=r":2:") as e:
        read_dataset(p, vocab_size=16, d_frame=2)
    assert e.match(f"(?i){match}")


def test_inconsistent_widths_across_lines(tmp_path):
    p = _write(tmp_path, [GOOD, {"frames": [[0.0, 1.0, 2.0]], "tokens": [4]}])
    with pytest.raises(DatasetError, match=":2:"):
        read_dataset(p)


def test_length_limits(tmp_path):
    p = _write(tmp_path, [{"frames": [[0.0, 1.0]] * 3, "tokens": [4]}])
    with pytest.raises(DatasetError, match=":1:"):
        read_dataset(p, max_frames=2)


def test_pair_equality_is_exact():
    a = VideoSentencePair(np.zeros((1, 2)), np.array([4]), 1, "a")
    assert a == VideoSentencePair(np.zeros((1, 2)), np.array([4]), 1, "a")
    assert a != VideoSentencePair(np.zeros((1, 2)), np.array([4]), 2, "a")
