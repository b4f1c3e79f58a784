import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cocobert.data import collate, frame_tokens
from cocobert.decoder import (DecodeMode, cross_modal_decode, decoder_mask, greedy_decode, mlm_loss, msg_inputs,
                              msg_logits, msg_loss, msg_token_stats)
from cocobert.gradcheck import grad_check
from cocobert.model import CoCoBert
from cocobert.nn import CLS_ID, SEP_ID, valid_mask
from cocobert.tensor import ShapeError, Tensor

B = DecodeMode.BIDIRECTIONAL
C = DecodeMode.CAUSAL_SENTENCE


def _states(rng, b=2, nv=3, ns=5, d=8):
    return Tensor(rng.normal(size=(b, nv, d))), Tensor(rng.normal(size=(b, ns, d)))


def test_mask_modes():
    vv = np.array([[1, 1, 0]], dtype=bool)
    sv = np.array([[1, 1, 1, 0]], dtype=bool)
    bi = decoder_mask(vv, sv, B)[0]
    assert bi.shape == (7, 7)
    np.testing.assert_array_equal(bi, np.broadcast_to([1, 1, 0, 1, 1, 1, 0], (7, 7)))
    ca = decoder_mask(vv, sv, C)[0]
    assert ca[:, :2].all() and not ca[:, 2].any()
    assert not ca[:3, 3:].any()
    np.testing.assert_array_equal(ca[3:, 3:], np.tril(np.ones((4, 4), dtype=bool)) & sv[0])


def test_zeroed_blocks_are_identity_up_to_final_norm(tiny_model, rng):
    dec = tiny_model.decoder
    for blk in dec.blocks:
        blk.zero_output_projections()
    v, s = _states(rng)
    out = cross_modal_decode(dec, v, np.ones((2, 3), bool), s, np.ones((2, 5), bool), B)
    x = np.concatenate([v.data, s.data], axis=1)
    np.testing.assert_allclose(out.data, dec.ln_f(Tensor(x)).data, atol=1e-14)


def test_fused_length(tiny_model, rng):
    v, s = _states(rng, nv=4, ns=6)
    out = cross_modal_decode(tiny_model.decoder, v, np.ones((2, 4), bool), s, np.ones((2, 6), bool), B)
    assert out.shape == (2, 10, 8)


def test_width_mismatch(tiny_model, rng):
    with pytest.raises(ShapeError):
        cross_modal_decode(tiny_model.decoder, Tensor(rng.normal(size=(1, 2, 8))), np.ones((1, 2), bool),
                           Tensor(rng.normal(size=(1, 2, 6))), np.ones((1, 2), bool), B)


@given(st.integers(0, 4), st.integers(1, 3), st.integers(0, 2**31))
def test_causal_prefix_any_depth(j, depth, seed):
    from cocobert.config import ModelConfig

    cfg = ModelConfig(d_frame=4, d_model=8, n_heads=2, vocab_size=12, max_frames=4, max_words=4,
                      decoder_blocks=depth)
    m = CoCoBert(cfg, seed=seed % 1000, memory_size=2)
    rng = np.random.default_rng(seed)
    v, s = _states(rng, b=1)
    s2 = s.data.copy()
    s2[0, j] = rng.normal(size=8)
    a = cross_modal_decode(m.decoder, v, np.ones((1, 3), bool), s, np.ones((1, 5), bool), C).data
    b = cross_modal_decode(m.decoder, v, np.ones((1, 3), bool), Tensor(s2), np.ones((1, 5), bool), C).data
    assert np.max(np.abs(a[0, 3:3 + j] - b[0, 3:3 + j]), initial=0.0) < 1e-10
    np.testing.assert_array_equal(a[0, :3], b[0, :3])


def test_bidirectional_video_permutation_invariance(tiny_model, rng):
    dec = tiny_model.decoder
    v, s = _states(rng, b=1)
    perm = np.array([2, 0, 1])
    a = cross_modal_decode(dec, v, np.ones((1, 3), bool), s, np.ones((1, 5), bool), B).data
    b = cross_modal_decode(dec, Tensor(v.data[:, perm]), np.ones((1, 3), bool), s, np.ones((1, 5), bool), B).data
    assert np.max(np.abs(a[:, 3:] - b[:, 3:])) < 1e-10


# -- MLM ---------------------------------------------------------------------------


def _uniform_vocab(dec):
    dec.vocab.w.data[...] = 0.0
    dec.vocab.b.data[...] = 0.0


def test_mlm_uniform_is_ln_v(tiny_model, rng):
    _uniform_vocab(tiny_model.decoder)
    _, s = _states(rng)
    mask = np.zeros((2, 5), bool)
    mask[0, 1] = mask[1, 3] = True
    toks = rng.integers(4, 16, size=(2, 5))
    assert mlm_loss(tiny_model.decoder, s, mask, toks).item() == pytest.approx(math.log(16), abs=1e-12)


def test_mlm_confident_logit_goes_to_zero(tiny_model, rng):
    dec = tiny_model.decoder
    _uniform_vocab(dec)
    dec.vocab.b.data[7] = 60.0
    mask = np.array([[False, True]])
    assert mlm_loss(dec, Tensor(rng.normal(size=(1, 2, 8))), mask, np.array([[1, 7]])).item() < 1e-20


def test_mlm_is_mean_of_positions(tiny_model, rng):
    dec = tiny_model.decoder
    _, s = _states(rng, b=1)
    toks = np.array([[1, 5, 6, 7, 2]])
    mask = np.array([[0, 1, 0, 1, 0]], bool)
    one = [mlm_loss(dec, s, np.eye(5, dtype=bool)[i][None], toks).item() for i in (1, 3)]
    assert abs(mlm_loss(dec, s, mask, toks).item() - np.mean(one)) < 1e-12


def test_mlm_empty_mask_rejected(tiny_model, rng):
    with pytest.raises(ValueError):
        mlm_loss(tiny_model.decoder, _states(rng)[1], np.zeros((2, 5), bool), np.ones((2, 5), int))


# -- MSG ---------------------------------------------------------------------------


def test_msg_inputs_shift():
    toks = np.array([[1, 5, 6, 2, 0], [1, 7, 2, 0, 0]])
    inp, tgt, valid = msg_inputs(toks, [4, 3])
    np.testing.assert_array_equal(inp, toks[:, :-1])
    np.testing.assert_array_equal(tgt, toks[:, 1:])
    np.testing.assert_array_equal(valid, [[1, 1, 1, 0], [1, 1, 0, 0]])


def test_msg_needs_a_body_token():
    with pytest.raises(ValueError):
        msg_inputs(np.array([[CLS_ID, SEP_ID]]), [2])


def test_msg_uniform_is_ln_v(tiny_model, rng):
    _uniform_vocab(tiny_model.decoder)
    v, _ = _states(rng)
    toks = np.array([[1, 5, 6, 2], [1, 7, 2, 0]])
    assert msg_loss(tiny_model, v, np.ones((2, 3), bool), toks, [4, 3]).item() == pytest.approx(math.log(16))


def test_msg_forced_logits_go_to_zero(tiny_model, rng):
    # one-body-token vocabulary: only [SEP] and token 4 ever get predicted
    m = tiny_model
    _uniform_vocab(m.decoder)
    toks = np.array([[1, 4, 2]])
    inp, _, _ = msg_inputs(toks, [3])
    v, _ = _states(rng, b=1)
    states, _ = m.sentence.query(inp, [2], causal=True)
    fused = cross_modal_decode(m.decoder, v, np.ones((1, 3), bool), states, np.ones((1, 2), bool), C).data[0, 3:]
    p = np.linalg.pinv(fused)  # fused @ p = I, so each position gets one large logit
    m.decoder.vocab.w.data[:, 4] = 80.0 * p[:, 0]
    m.decoder.vocab.w.data[:, 2] = 80.0 * p[:, 1]
    assert msg_loss(m, v, np.ones((1, 3), bool), toks, [3]).item() < 1e-20


def test_msg_matches_stepwise_decode(tiny_model, rng):
    m = tiny_model
    v, _ = _states(rng, b=1)
    vv = np.ones((1, 3), bool)
    toks = np.array([[1, 5, 9, 6, 2]])
    total = msg_loss(m, v, vv, toks, [5]).item()
    steps = []
    for j in range(1, 5):
        prefix = toks[:, :j]
        logits = msg_logits(m, v, vv, prefix, [j]).data[0, -1]
        lp = logits - logits.max() - np.log(np.exp(logits - logits.max()).sum())
        steps.append(-lp[toks[0, j]])
    assert abs(total - np.mean(steps)) < 1e-10


def test_msg_token_stats_consistent(tiny_model, tiny_pairs):
    b = collate(tiny_pairs[:5], mask=False)
    vs, _ = tiny_model.video.query(b.frames, b.frame_lengths)
    vv, _ = tiny_model.valid_masks(b)
    s, _, c = msg_token_stats(tiny_model, vs, vv, b.tokens, b.token_lengths)
    assert c == int((b.token_lengths - 1).sum())
    assert s / c == pytest.approx(msg_loss(tiny_model, vs, vv, b.tokens, b.token_lengths).item(), abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_head_grad_checks(seed, tiny_model_cfg):
    m = CoCoBert(tiny_model_cfg, seed=seed, memory_size=2)
    rng = np.random.default_rng(seed)
    toks = np.array([[1, 5, 9, 2], [1, 6, 2, 0]])
    vv = np.array([[1, 1, 1], [1, 1, 0]], bool)
    assert grad_check(lambda x: msg_loss(m, x, vv, toks, [4, 3]), rng.normal(size=(2, 3, 8))) <= 1e-5
    mask = np.array([[0, 1, 1, 0], [0, 1, 0, 0]], bool)
    sv = toks != 0

    def mlm(x):
        fused = cross_modal_decode(m.decoder, x[:, :3], vv, x[:, 3:], sv, B)
        return mlm_loss(m.decoder, fused[:, 3:], mask, toks)

    assert grad_check(mlm, rng.normal(size=(2, 7, 8))) <= 1e-5


# -- greedy decode -------------------------------------------------------------------


def test_greedy_single_token(tiny_model, rng):
    assert len(greedy_decode(tiny_model, rng.normal(size=(3, 6)), 1)) == 1


def test_greedy_deterministic(tiny_model, rng):
    f = rng.normal(size=(4, 6))
    assert greedy_decode(tiny_model, f, 6) == greedy_decode(tiny_model, f, 6)


def test_greedy_prefix_consistency(tiny_model, rng):
    f = rng.normal(size=(4, 6))
    out = greedy_decode(tiny_model, f, 6)
    vs, _ = tiny_model.video.query(f[None], [4])
    prefix = [CLS_ID] + [t for t in out if t != SEP_ID]
    logits = msg_logits(tiny_model, vs, np.ones((1, 4), bool), np.array([prefix]), [len(prefix)]).data[0]
    np.testing.assert_array_equal(logits.argmax(axis=-1)[: len(out)], out)


def test_greedy_ties_go_to_lowest_id(tiny_model, rng):
    _uniform_vocab(tiny_model.decoder)
    assert greedy_decode(tiny_model, rng.normal(size=(2, 6)), 3) == [0, 0, 0]


def test_greedy_rejects_zero_length(tiny_model, rng):
    with pytest.raises(ValueError):
        greedy_decode(tiny_model, rng.normal(size=(2, 6)), 0)


def test_non_negative_finite(tiny_model, tiny_pairs):
    b = collate(tiny_pairs[:6], np.random.default_rng(0))
    vs, _ = tiny_model.video.query(b.frames, b.frame_lengths, b.frame_mask)
    vv, sv = tiny_model.valid_masks(b)
    ss, _ = tiny_model.sentence.query(b.masked_tokens, b.token_lengths)
    fused = cross_modal_decode(tiny_model.decoder, vs, vv, ss, sv, B)
    for loss in (mlm_loss(tiny_model.decoder, fused[:, vs.shape[1]:], b.word_mask, b.tokens),
                 msg_loss(tiny_model, vs, vv, b.tokens, b.token_lengths)):
        assert np.isfinite(loss.item()) and loss.item() >= 0
    assert valid_mask(b.token_lengths, b.tokens.shape[1]).sum() == b.token_lengths.sum()
    assert frame_tokens([]).tolist() == [CLS_ID, SEP_ID]
