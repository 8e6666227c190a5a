from __future__ import annotations

import copy
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from voxedit import memnet
from voxedit.dataset import Batch, BatchSampler
from voxedit.errors import DataError, NumericalError, UsageError
from voxedit.reference import reference_loss, relu_margin
from voxedit.trainer import (
    ACTIVE_BLOCKS,
    MODES,
    Checkpoint,
    Model,
    TrainConfig,
    TrainState,
    adamw_step,
    batch_loss,
    certify_gradients,
    loss_align,
    loss_rec,
    tiny_problem,
    train,
    training_step,
    zero_moments,
)


def simplex(rng, n):
    return rng.dirichlet(np.ones(n))


# -- reference losses ---------------------------------------------------------

def test_loss_rec_zero_iff_perfect_reconstruction():
    s = np.array([1.0, -2.0, 0.5])
    assert loss_rec(s, s, s) == 0.0
    assert loss_rec(s, s + [0, 0, 1e-3], s) > 0
    assert loss_rec(s, s, s - [1e-3, 0, 0]) > 0
    assert loss_rec(s, s + 1.0, s) == pytest.approx(3.0)
    with pytest.raises(DataError):
        loss_rec(s, s[:2], s)


def test_loss_align_identities():
    w = np.array([0.2, 0.3, 0.5])
    assert loss_align(w, w, w, 0.4) == 0.0
    # point mass against a half/half mixture of itself and the other point mass
    assert loss_align(np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([1.0, 0.0]), 0.5) == \
        pytest.approx(math.log(2.0), rel=1e-12)
    with pytest.raises(DataError):
        loss_align(w, w, w, 1.0)
    with pytest.raises(DataError):
        loss_align(w, w[:2], w, 0.5)


@settings(max_examples=200, deadline=None)
@given(n=st.integers(1, 10), alpha=st.floats(1e-6, 1 - 1e-6), seed=st.integers(0, 2**31))
def test_loss_align_nonnegative(n, alpha, seed):
    rng = np.random.default_rng(seed)
    assert loss_align(simplex(rng, n), simplex(rng, n), simplex(rng, n), alpha) >= -1e-15


# -- batch objective ----------------------------------------------------------

@pytest.mark.parametrize("mode", MODES)
def test_tape_loss_matches_straight_line_reference(mode):
    rng = np.random.default_rng(4)
    cfg, model, b, eps = tiny_problem(rng, D=5, M=4, N=2, V=3, H=6, batch=5, mode=mode)
    losses, _ = batch_loss(model, b, eps, cfg)
    total, rec, align = reference_loss(model.flat(), b.s_a, b.s_b, b.x, eps, cfg, dtype=np.float64)
    assert losses.total == pytest.approx(float(total), rel=1e-10)
    assert losses.rec == pytest.approx(float(rec), rel=1e-10)
    assert losses.align == pytest.approx(float(align), rel=1e-10, abs=1e-14)


@pytest.mark.parametrize("mode", MODES)
def test_total_is_exact_weighted_sum(mode):
    rng = np.random.default_rng(5)
    cfg, model, b, eps = tiny_problem(rng, mode=mode)
    losses, _ = batch_loss(model, b, eps, cfg)
    assert losses.total == cfg.lambda_rec * losses.rec + cfg.lambda_align * losses.align


def test_per_item_loss_matches_reference_functions():
    rng = np.random.default_rng(6)
    cfg, model, b, _ = tiny_problem(rng, batch=1)
    eps = np.zeros(1)
    losses, _ = batch_loss(model, b, eps, cfg)
    mem, enc = model.mem, model.enc
    s_a, s_b, x = b.s_a[0], b.s_b[0], int(b.x[0])
    rec = 0.5 * sum(loss_rec(s, memnet.recall_speaker(mem, s)[2], memnet.recall_speaker(mem, s)[0]) for s in (s_a, s_b))
    t = memnet.encode_descriptor(enc, x)
    from voxedit.vadp import predict_degree

    alpha = predict_degree(model.vadp, s_a, s_b, t).alpha
    align = loss_align(memnet.readout_main(mem, s_b).weights, memnet.readout_descriptor(mem, t).weights,
                       memnet.readout_main(mem, s_a).weights, alpha)
    assert losses.rec == pytest.approx(rec, rel=1e-12)
    assert losses.align == pytest.approx(align, rel=1e-10)


def test_no_resmem_loss_is_direct_interpolation():
    rng = np.random.default_rng(7)
    cfg, model, b, eps = tiny_problem(rng, mode="no_resmem")
    losses, grads = batch_loss(model, b, eps, cfg)
    t = np.array([memnet.encode_descriptor(model.enc, int(x)) for x in b.x])
    assert losses.rec == pytest.approx(np.mean(np.sum((b.s_a + t - b.s_b) ** 2, axis=1)), rel=1e-12)
    assert losses.align == 0.0
    for k in ("M_mv", "M_rv", "M_k", "vadp.W1"):
        assert_array_equal(grads[k], 0.0)


# -- optimizer ----------------------------------------------------------------

def test_adamw_first_step_hand_value():
    cfg = TrainConfig(lr=0.1, weight_decay=0.0)
    p = {"w": np.array([1.0])}
    adamw_step(p, {"w": np.array([1.0])}, zero_moments(p), 1, cfg)
    assert p["w"][0] == pytest.approx(1 - 0.1 / (1 + 1e-8), rel=1e-15)


def test_adamw_decay_is_decoupled():
    cfg = TrainConfig(lr=0.1, weight_decay=0.5)
    p = {"w": np.array([2.0])}
    m = zero_moments(p)
    adamw_step(p, {"w": np.array([0.0])}, m, 1, cfg)
    # zero gradient: only the decay term acts, and it does not enter the moments
    assert p["w"][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0, rel=1e-15)
    assert m["m"]["w"][0] == 0.0 and m["v"]["w"][0] == 0.0


def test_adamw_matches_loop_over_steps():
    cfg = TrainConfig(lr=0.05, weight_decay=0.01, beta1=0.8, beta2=0.99)
    rng = np.random.default_rng(8)
    p = {"w": rng.standard_normal(3)}
    ref = p["w"].copy()
    mom = zero_moments(p)
    m_ref, v_ref = np.zeros(3), np.zeros(3)
    for t in range(1, 6):
        g = rng.standard_normal(3)
        adamw_step(p, {"w": g}, mom, t, cfg)
        m_ref = 0.8 * m_ref + 0.2 * g
        v_ref = 0.99 * v_ref + 0.01 * g * g
        ref = ref - 0.05 * ((m_ref / (1 - 0.8**t)) / (np.sqrt(v_ref / (1 - 0.99**t)) + 1e-8) + 0.01 * ref)
    assert_allclose(p["w"], ref, rtol=1e-14)


def test_adamw_touches_only_named_blocks():
    cfg = TrainConfig()
    p = {"a": np.ones(2), "b": np.ones(2)}
    adamw_step(p, {"a": np.ones(2), "b": np.ones(2)}, zero_moments(p), 1, cfg, names=("a",))
    assert_array_equal(p["b"], 1.0)
    assert np.all(p["a"] < 1.0)


# -- training -----------------------------------------------------------------

def _state(corpus, mode="full", seed=0):
    store, tuples, vocab, _ = corpus
    cfg = TrainConfig(M=6, N=2, batch_size=4, lr=1e-2, tau=2.0, mode=mode, seed=seed).resolved(store.dim, len(vocab))
    rng = np.random.default_rng(seed)
    model = Model.init(cfg, rng)
    return TrainState(cfg, model, zero_moments(model.flat()), rng), BatchSampler(store, tuples, vocab)


def test_training_step_records_independently_computed_loss(small_corpus):
    state, sampler = _state(small_corpus)
    batch = sampler.sample(4, state.rng)
    before = {k: v.copy() for k, v in state.model.flat().items()}
    eps = copy.deepcopy(state.rng).standard_normal(4)
    losses = training_step(state, batch)
    total, rec, align = reference_loss(before, batch.s_a, batch.s_b, batch.x, eps, state.config, dtype=np.float64)
    assert losses.total == pytest.approx(float(total), rel=1e-10)
    assert state.history[-1] == (1, losses.total, losses.rec, losses.align)
    assert any(not np.array_equal(before[k], v) for k, v in state.model.flat().items())


@pytest.mark.parametrize("mode", MODES)
def test_ablation_modes_freeze_inactive_blocks(small_corpus, mode):
    state, sampler = _state(small_corpus, mode)
    before = {k: v.copy() for k, v in state.model.flat().items()}
    for _ in range(3):
        training_step(state, sampler.sample(4, state.rng))
    for k, v in state.model.flat().items():
        changed = not np.array_equal(before[k], v)
        assert changed == (k in ACTIVE_BLOCKS[mode]), k


def test_collapsed_slot_stops_training(small_corpus):
    state, sampler = _state(small_corpus)
    state.model.mem.M_rv[0] = 0.0
    state.config = TrainConfig(**{**state.config.__dict__, "lr": 0.0, "weight_decay": 0.0})
    with pytest.raises(NumericalError):
        training_step(state, sampler.sample(4, state.rng))


def test_training_reduces_reconstruction(small_ckpt):
    h = small_ckpt.history
    assert len(h) == 40
    assert np.mean([r[2] for r in h[-5:]]) < np.mean([r[2] for r in h[:5]])


def test_train_is_deterministic_and_resumable(small_corpus):
    store, tuples, vocab, _ = small_corpus
    cfg = TrainConfig(M=6, N=2, steps=12, batch_size=4, lr=1e-2, seed=2)
    full = train(cfg, store, tuples, vocab)
    again = train(cfg, store, tuples, vocab)
    assert json.dumps(full.to_json()) == json.dumps(again.to_json())
    half = train(TrainConfig(**{**cfg.__dict__, "steps": 5}), store, tuples, vocab)
    resumed = train(cfg, store, tuples, vocab, resume=Checkpoint.from_json(json.loads(json.dumps(half.to_json()))))
    assert json.dumps(resumed.to_json()) == json.dumps(full.to_json())


def test_checkpoint_round_trip(tmp_path, small_ckpt):
    p = tmp_path / "c.json"
    small_ckpt.save(p)
    back = Checkpoint.load(p)
    assert back.config == small_ckpt.config and back.vocab == small_ckpt.vocab
    for k, v in small_ckpt.model.flat().items():
        assert_array_equal(back.model.flat()[k], v)
    back.save(tmp_path / "d.json")
    assert (tmp_path / "d.json").read_bytes() == p.read_bytes()
    small_ckpt.write_loss_csv(tmp_path / "loss.csv")
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,loss_total,loss_rec,loss_align" and len(lines) == 41


def test_checkpoint_errors(tmp_path, small_ckpt):
    d = small_ckpt.to_json()
    d["format"] = "other/9"
    with pytest.raises(DataError):
        Checkpoint.from_json(d)
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(DataError):
        Checkpoint.load(tmp_path / "bad.json")


def test_resume_with_other_vocab_fails(small_corpus, small_ckpt):
    store, tuples, _, _ = small_corpus
    from voxedit.dataset import synthetic_vocab

    bad = copy.deepcopy(small_ckpt)
    bad.vocab = synthetic_vocab(5)
    with pytest.raises(DataError):
        train(small_ckpt.config, store, tuples, small_corpus[2], resume=bad)


@pytest.mark.parametrize("kw", [dict(lambda_rec=-1), dict(beta1=1.0), dict(lr=-1), dict(batch_size=0),
                                dict(tau=0), dict(mode="nope")])
def test_config_validation(kw):
    with pytest.raises(UsageError):
        TrainConfig(**kw)


def test_config_from_dict_and_resolution():
    with pytest.raises(UsageError):
        TrainConfig.from_dict({"learning_rate": 1})
    cfg = TrainConfig.from_dict({"lr": 0.1}).resolved(7, 3)
    assert (cfg.D, cfg.V, cfg.H) == (7, 3, 7)
    with pytest.raises(DataError):
        TrainConfig(D=5).resolved(7, 3)


# -- gradient certification ---------------------------------------------------

def test_tiny_problem_avoids_relu_kinks():
    rng = np.random.default_rng(0)
    for _ in range(5):
        cfg, model, b, _ = tiny_problem(rng, margin=0.05)
        assert relu_margin(model.flat(), b.s_a, b.s_b, b.x, cfg) >= 0.05


@pytest.mark.parametrize("mode,n", [("no_voice_res", 3), ("no_vadp", 3), ("no_resmem", 5)])
def test_gradients_certified_in_ablation_modes(mode, n):
    reports = certify_gradients(seed=1, n_configs=n, mode=mode)
    assert all(r.passed for r in reports), [r.format() for r in reports if not r.passed]


def test_extended_precision_oracle_agrees_with_float64():
    rng = np.random.default_rng(9)
    cfg, model, b, eps = tiny_problem(rng)
    hi = reference_loss(model.flat(), b.s_a, b.s_b, b.x, eps, cfg)
    lo = reference_loss(model.flat(), b.s_a, b.s_b, b.x, eps, cfg, dtype=np.float64)
    assert float(hi[0]) == pytest.approx(float(lo[0]), rel=1e-13)


def test_batch_shapes():
    b = Batch(np.zeros((3, 2)), np.zeros((3, 2)), np.array([0, 1, 0]))
    assert len(b) == 3 and len(b.items()) == 3
