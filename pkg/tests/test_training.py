import itertools
import json
import math

import numpy as np
import pytest

from cocobert.checkpoint import CheckpointError, decode, encode
from cocobert.config import ALL_LOSSES, build_config, parse_overrides, read_config_file
from cocobert.data import collate
from cocobert.model import compute_losses
from cocobert.tensor import Tensor
from cocobert.training import (AdamState, NonFiniteLoss, Trainer, adam_update, load_checkpoint,
                               restore_rng, rng_state_array, save_checkpoint)

from conftest import TINY_OVERRIDES


# -- Adam --------------------------------------------------------------------------


def test_adam_zero_grad_keeps_weights():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    s = AdamState.for_params(p)
    p["w"].grad = np.zeros(2)
    adam_update(p, s, 1e-3)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])
    p["w"].grad = None  # missing grad counts as zero
    adam_update(p, s, 1e-3)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    p = {"w": Tensor(np.array([0.0, 0.0, 0.0]), requires_grad=True)}
    s = AdamState.for_params(p)
    p["w"].grad = np.array([3.0, -1e-3, 50.0])
    adam_update(p, s, 0.01)
    np.testing.assert_allclose(p["w"].data, [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adam_matches_scalar_oracle():
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
    grads = [0.3, -1.2, 0.7, 0.0, 2.5, -0.4, 0.1, 0.1, -3.0, 0.9]
    p = {"w": Tensor(np.array([0.5]), requires_grad=True)}
    s = AdamState.for_params(p)
    x, m, v = 0.5, 0.0, 0.0
    for t, g in enumerate(grads, 1):
        p["w"].grad = np.array([g])
        adam_update(p, s, lr, b1, b2, eps)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        assert abs(p["w"].data[0] - x) <= 1e-12


# -- loss bookkeeping --------------------------------------------------------------


def _batch(pairs, seed=0):
    return collate(pairs[:8], np.random.default_rng(seed))


def test_mlm_only_total_is_mlm(tiny_model, tiny_pairs):
    out = compute_losses(tiny_model, _batch(tiny_pairs), ("mlm",), 0.2)
    assert set(out.terms) == {"mlm"}
    assert out.total.item() == out.terms["mlm"].item()


@pytest.mark.parametrize("subset", [c for r in (2, 3, 5) for c in itertools.combinations(ALL_LOSSES, r)][:8])
def test_total_is_sum_of_enabled_terms(tiny_model, tiny_pairs, subset):
    out = compute_losses(tiny_model, _batch(tiny_pairs), subset, 0.2)
    assert set(out.terms) == set(subset)
    assert abs(out.total.item() - sum(t.item() for t in out.terms.values())) <= 1e-12
    # each term is the value computed alone
    for name in subset:
        alone = compute_losses(tiny_model, _batch(tiny_pairs), (name,), 0.2).terms[name].item()
        assert abs(alone - out.terms[name].item()) <= 1e-12


def test_key_encoders_get_no_gradient(tiny_cfg, tiny_pairs):
    tr = Trainer(tiny_cfg, tiny_pairs)
    tr.train_steps(2)
    for name, p in tr.model.key_parameters().items():
        assert not p.requires_grad and (p.grad is None or not np.any(p.grad)), name


def test_step_updates_memory_and_momentum(tiny_cfg, tiny_pairs):
    tr = Trainer(tiny_cfg, tiny_pairs)
    before = tr.model.mem_v.buffer.copy()
    key0 = {k: p.data.copy() for k, p in tr.model.key_parameters().items()}
    tr.train_steps(1)
    assert not np.array_equal(before, tr.model.mem_v.buffer)
    assert any(not np.array_equal(key0[k], p.data) for k, p in tr.model.key_parameters().items())


def test_non_contrastive_run_leaves_memory_alone(tiny_cfg, tiny_pairs):
    cfg = build_config(overrides={**TINY_OVERRIDES, "losses": ("mlm", "msg")})
    tr = Trainer(cfg, tiny_pairs)
    before = tr.model.mem_s.buffer.copy()
    tr.train_steps(2)
    np.testing.assert_array_equal(before, tr.model.mem_s.buffer)


def test_non_finite_loss_names_the_term(tiny_cfg, tiny_pairs):
    tr = Trainer(tiny_cfg, tiny_pairs)
    tr.model.decoder.vocab.w.data[0, 0] = np.nan
    with pytest.raises(NonFiniteLoss, match="mlm|msg"):
        tr.train_steps(1)


# -- determinism -------------------------------------------------------------------


def test_replay_is_bit_identical(tiny_cfg, tiny_pairs, tmp_path):
    texts = []
    for run in range(2):
        path = tmp_path / f"m{run}.jsonl"
        tr = Trainer(tiny_cfg, tiny_pairs, timing=False)
        with open(path, "w") as fh:
            tr.train_steps(50, fh)
        texts.append(path.read_bytes())
    assert texts[0] == texts[1]
    rows = [json.loads(x) for x in texts[0].decode().splitlines()]
    assert len(rows) == 50 and all(r["seconds"] is None for r in rows)
    assert rows[0]["loss_cmm"] is None and rows[0]["loss_mlm"] is not None
    assert [r["epoch"] for r in rows[:4]] == [0, 0, 0, 1]


def test_epoch_order_is_a_permutation(tiny_cfg, tiny_pairs):
    tr = Trainer(tiny_cfg, tiny_pairs)
    o = tr.epoch_order(2)
    assert sorted(o.tolist()) == list(range(len(tiny_pairs)))
    np.testing.assert_array_equal(o, np.random.default_rng([0, 400, 2]).permutation(24))


def test_steps_per_epoch_drops_singleton_tail(tiny_cfg, tiny_pairs):
    assert Trainer(tiny_cfg, tiny_pairs[:17]).steps_per_epoch() == 2
    assert Trainer(tiny_cfg, tiny_pairs[:18]).steps_per_epoch() == 3


def test_rng_state_round_trip():
    r = np.random.default_rng(77)
    r.random(3)
    r.integers(0, 2**32, dtype=np.uint32)  # leaves a buffered half word
    clone = restore_rng(rng_state_array(r))
    np.testing.assert_array_equal(r.random(5), clone.random(5))
    assert r.integers(0, 2**32, dtype=np.uint32) == clone.integers(0, 2**32, dtype=np.uint32)


# -- checkpoints -------------------------------------------------------------------


def test_save_load_save_is_byte_identical(tiny_cfg, tiny_pairs, tmp_path):
    tr = Trainer(tiny_cfg, tiny_pairs)
    tr.train_steps(3)
    a, b = tmp_path / "a.ccbt", tmp_path / "b.ccbt"
    save_checkpoint(a, tr)
    save_checkpoint(b, load_checkpoint(a, tiny_pairs))
    assert a.read_bytes() == b.read_bytes()


def test_resume_equals_unbroken(tiny_cfg, tiny_pairs, tmp_path):
    full = Trainer(tiny_cfg, tiny_pairs, timing=False)
    rows_full = full.train_steps(20)
    half = Trainer(tiny_cfg, tiny_pairs, timing=False)
    rows = half.train_steps(10)
    save_checkpoint(tmp_path / "c.ccbt", half)
    resumed = load_checkpoint(tmp_path / "c.ccbt", tiny_pairs, timing=False)
    rows += resumed.train_steps(10)
    assert rows == rows_full
    for name, p in full.model.all_parameters().items():
        np.testing.assert_array_equal(p.data, resumed.model.all_parameters()[name].data)


def test_config_echo_restores_config(tiny_cfg, tiny_pairs, tmp_path):
    tr = Trainer(tiny_cfg, tiny_pairs)
    save_checkpoint(tmp_path / "c.ccbt", tr)
    assert load_checkpoint(tmp_path / "c.ccbt").cfg == tiny_cfg


@pytest.fixture
def blob(tiny_cfg, tiny_pairs):
    return encode(Trainer(tiny_cfg, tiny_pairs).state_tensors())


def test_corrupt_byte_detected(blob):
    bad = bytearray(blob)
    bad[len(bad) // 2] ^= 0x01
    with pytest.raises(CheckpointError, match="checksum|truncated|dtype|trailing"):
        decode(bytes(bad))


def test_bad_magic_and_version(blob):
    with pytest.raises(CheckpointError, match="magic"):
        decode(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="version"):
        decode(blob[:4] + (9).to_bytes(4, "little") + blob[8:])


@pytest.mark.parametrize("cut", [0, 10, 100, -9, -1])
def test_truncation_detected(blob, cut):
    with pytest.raises(CheckpointError):
        decode(blob[:cut])


def test_unknown_and_missing_names(tiny_cfg, tiny_pairs):
    tr = Trainer(tiny_cfg, tiny_pairs)
    st = tr.state_tensors()
    with pytest.raises(CheckpointError, match="unknown"):
        tr.load_state_tensors({**st, "param/extra": np.zeros(1)})
    st.pop("adam/step")
    with pytest.raises(CheckpointError, match="missing"):
        tr.load_state_tensors(st)


def test_shape_mismatch(tiny_cfg, tiny_pairs):
    tr = Trainer(tiny_cfg, tiny_pairs)
    st = tr.state_tensors()
    name = next(k for k in st if k.startswith("param/"))
    st[name] = np.zeros(st[name].size + 1)
    with pytest.raises(CheckpointError, match="shape"):
        tr.load_state_tensors(st)


def test_unsupported_dtype():
    with pytest.raises(CheckpointError, match="dtype"):
        encode({"x": np.zeros(2, dtype=np.float32)})


def test_encode_decode_round_trip():
    t = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([2**63], dtype=np.uint64),
         "c": np.frombuffer(b"hi", dtype=np.uint8), "d": np.float64(1.5).reshape(())}
    back = decode(encode(t))
    assert list(back) == list(t)
    for k in t:
        assert back[k].dtype == t[k].dtype
        np.testing.assert_array_equal(back[k], t[k])


# -- configuration -----------------------------------------------------------------


def test_three_layer_precedence(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# comment\nd_model = 32\ntau = 0.1\nlosses = mlm,msg\n")
    cfg = build_config(file_values=read_config_file(f), overrides=parse_overrides(["tau=0.5"]))
    assert cfg.model.d_model == 32  # file beats default
    assert cfg.train.tau == 0.5  # override beats file
    assert cfg.train.lr == 1e-3  # default survives
    assert cfg.train.losses == ("mlm", "msg")


def test_preset_sits_under_file():
    cfg = build_config("desk-tiny", {"d_model": 32})
    assert cfg.model.d_model == 32 and cfg.model.vocab_size == 24


@pytest.mark.parametrize("bad", [{"d_modle": 8}, {"nonsense": 1}])
def test_unknown_keys_rejected(bad):
    with pytest.raises(KeyError):
        build_config(overrides=bad)


@pytest.mark.parametrize("bad", [{"losses": ("mlm", "bogus")}, {"d_model": 10, "n_heads": 4},
                                 {"tau": 0.0}, {"batch_size": 2.5}, {"momentum": 1.5}])
def test_invalid_values_rejected(bad):
    with pytest.raises(ValueError):
        build_config(overrides=bad)


def test_malformed_config_line(tmp_path):
    f = tmp_path / "x.cfg"
    f.write_text("d_model 32\n")
    with pytest.raises(ValueError, match=":1:"):
        read_config_file(f)


def test_model_covers_data_lengths():
    cfg = build_config(overrides={"frames_max": 20})
    assert cfg.model.max_frames == 20


# -- learning signal ---------------------------------------------------------------


@pytest.mark.slow
@pytest.mark.parametrize("term", ALL_LOSSES)
def test_each_term_decreases(term, tiny_pairs):
    cfg = build_config(overrides={**TINY_OVERRIDES, "losses": (term,), "lr": 3e-3, "memory_size": 8})
    tr = Trainer(cfg, tiny_pairs, timing=False)
    rows = tr.train_steps(tr.steps_per_epoch() * 15)
    first = np.mean([r["loss_total"] for r in rows[:3]])
    last = np.mean([r["loss_total"] for r in rows[-3:]])
    assert last < first


def test_shipped_config_files_parse():
    from pathlib import Path

    root = Path(__file__).resolve().parents[1] / "configs"
    assert build_config(file_values=read_config_file(root / "desk.cfg")) == build_config()
    full = build_config(file_values=read_config_file(root / "full-scale.cfg"))
    assert full.model.video_blocks == 6 and full.train.memory_size == 8192
    assert full == build_config("full-scale", overrides={"momentum": 0.99, "losses": full.train.losses})
