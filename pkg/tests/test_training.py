import math

import numpy as np
import pytest

from caml.checkpoint import CheckpointError, HashMismatchError, read_container, write_container
from caml.corpus import build_vocabulary
from caml.model import ModelKind, forward, init_params
from caml.numerics import make_rng
from caml.training import (
    AdamState,
    TrainConfig,
    TrainingError,
    adam_step,
    batch_loss_and_grads,
    bce,
    desc_penalty,
    l2_penalty,
    load_checkpoint,
    loss,
    save_checkpoint,
    train,
)

FAST = dict(d_e=8, d_c=6, k=3, eta=3e-3, batch_size=8)


def test_bce_examples():
    assert bce([0.5], [1]) == pytest.approx(math.log(2), abs=1e-15)
    assert bce([1.0, 0.0], [1, 0]) < 1e-11
    assert math.isfinite(bce([0.0, 1.0], [1, 0]))


def tiny_params(seed=0, desc=False):
    rng = make_rng(seed, "t")
    return init_params(rng.normal(size=(10, 4)), 3, 5, 3, rng, with_desc=desc)


def test_loss_terms_isolated():
    p = tiny_params(desc=True)
    t = forward(p, [1, 2, 3])
    y = np.array([1.0, 0, 1])
    assert loss(t.yhat, y, p) == bce(t.yhat, y)
    z = {0: p.out_weight[0].copy(), 2: p.out_weight[2].copy()}
    assert desc_penalty(p, y, z) == 0.0
    assert loss(t.yhat, y, p, lam=5.0, z=z) == bce(t.yhat, y)
    assert desc_penalty(p, np.zeros(3), {}) == 0.0
    z[0] = z[0] + np.array([3.0, 4, 0, 0, 0])
    assert desc_penalty(p, y, z) == pytest.approx(2.5)
    expected_l2 = sum((p.tensors()[n] ** 2).sum() for n in
                      ("embeddings", "conv_weight", "attention", "out_weight", "desc.conv_weight"))
    assert l2_penalty(p) == pytest.approx(expected_l2)


def test_adam_zero_gradient_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    state = AdamState()
    for _ in range(5):
        adam_step(p, {"w": np.zeros(2)}, state, 0.1)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_constant_gradient_step_tends_to_eta_sign():
    p = {"w": np.array([0.0, 0.0])}
    g = {"w": np.array([0.3, -2.0])}
    state = AdamState()
    eta = 1e-3
    prev = p["w"].copy()
    for _ in range(200):
        adam_step(p, g, state, eta)
        step = p["w"] - prev
        prev = p["w"].copy()
    # with a constant gradient both bias-corrected moments are exact, so the step is eta*g/(|g|+eps)
    np.testing.assert_allclose(step, -eta * np.sign(g["w"]), rtol=1e-6)


def test_adam_shape_check():
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(), 0.1)


def test_config_validation_and_defaults():
    c = TrainConfig()
    assert (c.d_c, c.k, c.eta, c.q) == (50, 10, 1e-4, 0.2)
    cnn = TrainConfig.for_model("cnn")
    assert (cnn.d_c, cnn.k, cnn.eta) == (500, 4, 3e-3)
    assert TrainConfig.from_mapping({"model_kind": "cnn", "k": 5}).k == 5
    for bad in ({"q": 1.0}, {"eta": 0.0}, {"lam": -1}, {"rho": -0.1}, {"model_kind": "rnn"}, {"patience": -1}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_mapping({"bogus": 1})


def test_batch_loss_decreases_on_fixed_batch(small_dataset):
    ds = small_dataset
    for seed in range(3):  # sanity check with retries, not a theorem
        cfg = TrainConfig(q=0.0, seed=seed, **FAST)
        emb = make_rng(seed, "e").uniform(-0.1, 0.1, size=(len(ds.vocab), cfg.d_e))
        p = init_params(emb, len(ds.space), cfg.d_c, cfg.k, make_rng(seed, "init"))
        batch = ds.train[:8]
        state, tensors = AdamState(), p.tensors()
        first, _ = batch_loss_and_grads(p, batch, cfg)
        for _ in range(20):
            last, grads = batch_loss_and_grads(p, batch, cfg)
            adam_step(tensors, grads, state, cfg.eta)
        last, _ = batch_loss_and_grads(p, batch, cfg)
        if last < first:
            return
    pytest.fail("loss did not decrease over 20 Adam steps for any of 3 seeds")


def scripted(values):
    return lambda params, epoch: values[epoch - 1] if epoch <= len(values) else 0.0


def test_early_stopping_picks_argmax_and_halts(small_dataset):
    ds = small_dataset
    seq = [0.3, 0.5, 0.4, 0.45, 0.5, 0.2, 0.1, 0.49]
    cfg = TrainConfig(patience=3, max_epochs=50, **FAST)
    ckpt = train(ds.train, ds.val, ds.vocab, ds.space, cfg, val_scorer=scripted(seq))
    assert ckpt.epoch == 2  # tie at epoch 5 goes to the earlier epoch
    assert len(ckpt.history) == 5
    assert ckpt.best_val == 0.5


def test_best_checkpoint_params_are_from_best_epoch(small_dataset):
    ds = small_dataset
    snaps = {}

    def scorer(params, epoch):
        snaps[epoch] = params.copy()
        return [0.1, 0.9, 0.2, 0.3][epoch - 1]

    cfg = TrainConfig(patience=2, max_epochs=10, **FAST)
    ckpt = train(ds.train, ds.val, ds.vocab, ds.space, cfg, val_scorer=scorer)
    assert ckpt.epoch == 2
    for name, arr in ckpt.params.tensors().items():
        np.testing.assert_array_equal(arr, snaps[2].tensors()[name])


def test_patience_zero_runs_one_epoch(small_dataset):
    ds = small_dataset
    ckpt = train(ds.train, ds.val, ds.vocab, ds.space, TrainConfig(patience=0, **FAST))
    assert len(ckpt.history) == 1 and ckpt.epoch == 1


def test_never_returns_worse_than_seen(small_dataset):
    ds = small_dataset
    ckpt = train(ds.train, ds.val, ds.vocab, ds.space, TrainConfig(patience=2, max_epochs=8, **FAST))
    assert ckpt.best_val == max(h["val"] for h in ckpt.history)


def test_non_finite_loss_raises(small_dataset):
    ds = small_dataset
    cfg = TrainConfig(**{**FAST, "eta": 1e300})
    with pytest.raises(TrainingError, match="epoch 1"):
        train(ds.train, ds.val, ds.vocab, ds.space, cfg)


def test_non_finite_embeddings_rejected(small_dataset):
    ds = small_dataset
    emb = np.full((len(ds.vocab), 8), np.nan)
    with pytest.raises(ValueError, match="non-finite"):
        train(ds.train, ds.val, ds.vocab, ds.space, TrainConfig(**FAST), embeddings=emb)


def test_checkpoint_roundtrip_bitwise(small_dataset, tmp_path):
    ds = small_dataset
    for kind in ("caml", "cnn"):
        cfg = TrainConfig(model_kind=kind, lam=0.5 if kind == "caml" else 0.0, patience=0, **FAST)
        ckpt = train(ds.train, ds.val, ds.vocab, ds.space, cfg)
        save_checkpoint(ckpt, tmp_path / f"{kind}.ckpt")
        back = load_checkpoint(tmp_path / f"{kind}.ckpt", ds.vocab, ds.space)
        assert back.config == cfg and back.epoch == ckpt.epoch and back.history == ckpt.history
        assert np.array_equal(back.predict(ds.test), ckpt.predict(ds.test))


def test_checkpoint_rejects_other_vocabulary(small_dataset, tmp_path):
    ds = small_dataset
    ckpt = train(ds.train, ds.val, ds.vocab, ds.space, TrainConfig(patience=0, **FAST))
    save_checkpoint(ckpt, tmp_path / "m.ckpt")
    other = build_vocabulary(ds.corpus.docs[:5], 1)
    with pytest.raises(HashMismatchError):
        load_checkpoint(tmp_path / "m.ckpt", other)


def test_container_corruption(tmp_path):
    path = tmp_path / "c.bin"
    write_container(path, {"a": 1}, {"w": np.arange(6.0).reshape(2, 3)})
    meta, tensors = read_container(path)
    assert meta == {"a": 1} and tensors["w"].shape == (2, 3)
    raw = path.read_bytes()
    assert raw[:5] == b"CAML1"
    (tmp_path / "t.bin").write_bytes(raw[:-9])
    with pytest.raises(CheckpointError):
        read_container(tmp_path / "t.bin")
    flipped = bytearray(raw)
    flipped[-12] ^= 0xFF
    (tmp_path / "f.bin").write_bytes(bytes(flipped))
    with pytest.raises(CheckpointError):
        read_container(tmp_path / "f.bin")
    (tmp_path / "m.bin").write_bytes(b"NOPE1" + raw[5:])
    with pytest.raises(CheckpointError, match="magic"):
        read_container(tmp_path / "m.bin")


def test_training_is_deterministic(small_dataset):
    ds = small_dataset
    cfg = TrainConfig(patience=2, max_epochs=4, q=0.3, **FAST)
    a = train(ds.train, ds.val, ds.vocab, ds.space, cfg)
    b = train(ds.train, ds.val, ds.vocab, ds.space, cfg)
    assert a.history == b.history
    c = train(ds.train, ds.val, ds.vocab, ds.space, TrainConfig(patience=2, max_epochs=4, q=0.3, seed=1, **FAST))
    assert [h["loss"] for h in c.history] != [h["loss"] for h in a.history]


def test_caml_learns_training_set(small_dataset):
    ds = small_dataset
    cfg = TrainConfig(patience=100, max_epochs=40, val_metric="micro_f1", q=0.0, **FAST)
    ckpt = train(ds.train, ds.val, ds.vocab, ds.space, cfg)
    h = ckpt.history
    assert h[-1]["loss"] < h[0]["loss"] / 2
    assert ckpt.kind == ModelKind.CAML.value
