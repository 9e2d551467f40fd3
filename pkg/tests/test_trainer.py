from __future__ import annotations

import json
import math

import numpy as np
import pytest

from conftest import TINY
from muscall import trainer
from muscall.config import TrainConfig
from muscall.data import DataError, Dataset
from muscall.numcore import NumericOverflowError, Parameter, default_dtype, no_grad
from muscall.numcore.serialize import FormatError
from muscall.objectives import bidirectional_loss
from muscall.trainer import (
    AdamState,
    Pipeline,
    TrainingDiverged,
    adam_step,
    build_batch,
    build_model,
    cosine_lr,
    fit,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)


def tiny_cfg(**changes) -> TrainConfig:
    return TrainConfig.from_dict({**TINY, "loss_weighting": False, **changes})


@pytest.fixture(scope="module")
def ds(tiny_corpus):
    return Dataset.load(tiny_corpus)


@pytest.fixture(scope="module")
def pipeline(ds):
    return Pipeline.fit(ds.split("train"), tiny_cfg())


@pytest.fixture(scope="module")
def trained(ds, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return fit(ds, tiny_cfg(), out), out


def named(data, name, decay=True):
    p = Parameter(np.asarray(data, dtype=np.float64), decay=decay)
    p.name = name
    return p


# --- batching ----------------------------------------------------------------------

def test_batch_rejects_repeated_indices(ds, pipeline):
    with pytest.raises(ValueError, match="distinct"):
        build_batch(ds.split("train"), [0, 1, 0], tiny_cfg(), np.random.default_rng(0), pipeline)


def test_batch_rows_pair_audio_with_own_caption(ds, pipeline):
    train = ds.split("train")
    b = build_batch(train, [3, 1, 4], tiny_cfg(), np.random.default_rng(0), pipeline)
    assert b.caption_ids == [train.ids[i] for i in (3, 1, 4)]
    assert b.captions == [train.captions[i] for i in (3, 1, 4)]
    assert b.mels.shape[0] == b.ids.shape[0] == 3


def test_batch_without_crop_or_aug_ignores_rng(ds, pipeline):
    cfg = tiny_cfg(random_crop=False, audio_aug=False)
    train = ds.split("train")
    a = build_batch(train, [0, 2], cfg, np.random.default_rng(1), pipeline)
    b = build_batch(train, [0, 2], cfg, np.random.default_rng(99), pipeline)
    assert np.array_equal(a.mels, b.mels)


def test_batch_same_seed_is_bitwise_identical(ds, pipeline):
    train = ds.split("train")
    a = build_batch(train, [0, 2, 5], tiny_cfg(), np.random.default_rng(5), pipeline)
    b = build_batch(train, [0, 2, 5], tiny_cfg(), np.random.default_rng(5), pipeline)
    c = build_batch(train, [0, 2, 5], tiny_cfg(), np.random.default_rng(6), pipeline)
    assert np.array_equal(a.mels, b.mels)
    assert not np.array_equal(a.mels, c.mels)


def test_eval_batch_is_center_cropped(ds, pipeline):
    train = ds.split("train")
    a = build_batch(train, [0, 1], tiny_cfg(), np.random.default_rng(1), pipeline, train=False)
    b = build_batch(train, [0, 1], tiny_cfg(), np.random.default_rng(2), pipeline, train=False)
    assert np.array_equal(a.mels, b.mels)


# --- optimiser ---------------------------------------------------------------------

def test_adam_zero_gradient_no_decay_is_fixed_point():
    p = named([1.0, -2.0, 3.0], "w")
    state = AdamState.init([p])
    assert adam_step([p], {"w": np.zeros(3)}, state, 0.1, 0.0)
    assert np.array_equal(p.data, [1.0, -2.0, 3.0])


def test_adam_first_step_moves_by_lr_against_gradient_sign():
    p = named([0.5, 0.5, 0.5], "w")
    g = np.array([3.0, -0.01, 1e3])
    adam_step([p], {"w": g}, AdamState.init([p]), 1e-3, 0.0)
    # bias-corrected first step is g/|g| up to eps
    assert np.allclose(p.data, 0.5 - 1e-3 * np.sign(g), atol=1e-8)


def test_adam_decay_only_scales_by_one_minus_lr_wd():
    p = named([2.0, -4.0], "w")
    q = named([2.0, -4.0], "b", decay=False)
    adam_step([p, q], {"w": np.zeros(2), "b": np.zeros(2)}, AdamState.init([p, q]), 0.1, 0.2)
    assert np.allclose(p.data, [2.0 * 0.98, -4.0 * 0.98], rtol=0, atol=1e-15)
    assert np.array_equal(q.data, [2.0, -4.0])


def test_adam_matches_reference_over_steps():
    rng = np.random.default_rng(0)
    p = named(rng.standard_normal(4), "w")
    ref, m, v = p.data.copy(), np.zeros(4), np.zeros(4)
    state = AdamState.init([p])
    for t in range(1, 6):
        g = rng.standard_normal(4)
        adam_step([p], {"w": g}, state, 0.01, 0.1, (0.9, 0.999), 1e-8)
        ref = ref * (1 - 0.01 * 0.1)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(p.data, ref, rtol=0, atol=1e-14)


def test_adam_skips_whole_step_on_nonfinite_gradient():
    p, q = named([1.0], "a"), named([1.0], "b")
    state = AdamState.init([p, q])
    assert not adam_step([p, q], {"a": np.array([1.0]), "b": np.array([np.nan])}, state, 0.1, 0.0)
    assert p.data[0] == 1.0 and q.data[0] == 1.0
    assert state.t == 0 and state.skipped == 1


def test_cosine_schedule():
    assert cosine_lr(0, 10, 1.0) == 1.0
    assert cosine_lr(10, 10, 1.0) == pytest.approx(0.0, abs=1e-15)
    assert cosine_lr(5, 10, 1.0) == pytest.approx(0.5)
    vals = [cosine_lr(s, 10, 1.0) for s in range(11)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        cosine_lr(0, 0, 1.0)
    with pytest.raises(ValueError):
        cosine_lr(11, 10, 1.0)


# --- training loop -----------------------------------------------------------------

def test_fit_writes_log_and_best_checkpoint(trained):
    result, out = trained
    rows = [json.loads(line) for line in (out / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in rows] == [0, 1]
    assert set(rows[0]) == {"epoch", "train_loss", "val_r10", "val_map10", "lr"}
    assert (out / "best.ckpt").exists()
    best = max(rows, key=lambda r: (r["val_r10"], r["val_map10"]))
    assert result.checkpoint.epoch == best["epoch"]
    assert result.checkpoint.best_val_r10 == best["val_r10"]


def test_fit_without_ssl_never_calls_nt_xent(trained):
    result, _ = trained
    assert result.counters["nt_xent"] == 0
    assert result.counters["bidirectional"] == result.counters["steps"] > 0


def test_fit_with_ssl_uses_both_losses(ds):
    result = fit(ds, tiny_cfg(ssl=True, max_epochs=1))
    assert result.counters["nt_xent"] == result.counters["bidirectional"] > 0


def test_first_batch_loss_equals_standalone_objective(ds, trained):
    result, _ = trained
    cfg = tiny_cfg()
    train = ds.split("train")
    with default_dtype(cfg.dtype):
        pipe = Pipeline.fit(train, cfg)
        model = build_model(cfg, len(pipe.vocab))
        order = np.random.default_rng([cfg.seed, 1]).permutation(len(train))
        b = build_batch(train, order[:cfg.batch_size], cfg, np.random.default_rng([cfg.seed, 2]), pipe)
        with no_grad():
            loss = bidirectional_loss(model.encode_audio(b.mels), model.encode_text(b.ids, b.eot), model.inv_tau())
    assert loss.item() == result.first_batch_loss


def test_same_seed_reproduces_epoch_loss(ds, trained):
    result, _ = trained
    again = fit(ds, tiny_cfg())
    assert again.log[0]["train_loss"] == result.log[0]["train_loss"]
    assert again.first_batch_loss == result.first_batch_loss


def test_zero_learning_rate_leaves_weights_unchanged(ds, monkeypatch):
    cfg = tiny_cfg(max_epochs=1)
    monkeypatch.setattr(trainer, "cosine_lr", lambda step, total, lr0: 0.0)
    result = fit(ds, cfg)
    with default_dtype(cfg.dtype):
        fresh = build_model(cfg, len(result.pipeline.vocab))
    before, after = fresh.state_dict(), result.model.state_dict()
    assert before.keys() == after.keys()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_three_nonfinite_losses_abort(ds, monkeypatch):
    def boom(*args, **kwargs):
        raise NumericOverflowError("loss is nan")

    monkeypatch.setattr(trainer, "compute_loss", boom)
    with pytest.raises(TrainingDiverged, match="3 consecutive"):
        fit(ds, tiny_cfg(max_epochs=1))


def test_isolated_nonfinite_loss_is_skipped(ds, monkeypatch):
    real = trainer.compute_loss
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 1:
            raise NumericOverflowError("transient")
        return real(*args, **kwargs)

    monkeypatch.setattr(trainer, "compute_loss", flaky)
    result = fit(ds, tiny_cfg(max_epochs=1))
    assert result.counters["nonfinite_loss"] == 1
    assert math.isfinite(result.log[0]["train_loss"])


def test_fit_needs_validation_split(ds):
    train_only = Dataset(ds.records, {r.id: "train" for r in ds.records})
    with pytest.raises(DataError, match="valid"):
        fit(train_only, tiny_cfg(max_epochs=1))


# --- checkpoints -------------------------------------------------------------------

def test_checkpoint_round_trip_is_bitwise(ds, trained, tmp_path):
    result, out = trained
    ckpt = load_checkpoint(out / "best.ckpt")
    model, pipe, cfg = model_from_checkpoint(ckpt)
    valid = ds.split("valid")
    za0, zt0 = trainer.embed_split(result.model, valid, result.pipeline, cfg)
    za1, zt1 = trainer.embed_split(model, valid, pipe, cfg)
    assert np.array_equal(za0, za1) and np.array_equal(zt0, zt1)
    assert all(np.array_equal(ckpt.adam_m[k], result.checkpoint.adam_m[k]) for k in ckpt.adam_m)
    assert ckpt.adam_t == result.checkpoint.adam_t
    save_checkpoint(ckpt, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == (out / "best.ckpt").read_bytes()


def test_checkpoint_bad_magic(trained, tmp_path):
    _, out = trained
    raw = bytearray((out / "best.ckpt").read_bytes())
    raw[0:4] = b"JUNK"
    (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_checkpoint_truncated(trained, tmp_path):
    _, out = trained
    raw = (out / "best.ckpt").read_bytes()
    (tmp_path / "short.ckpt").write_bytes(raw[:-10])
    with pytest.raises(FormatError, match="expected .* bytes, found"):
        load_checkpoint(tmp_path / "short.ckpt")
    (tmp_path / "tiny.ckpt").write_bytes(raw[:10])
    with pytest.raises(FormatError, match="truncated header"):
        load_checkpoint(tmp_path / "tiny.ckpt")


def test_checkpoint_version_mismatch(trained, tmp_path):
    _, out = trained
    raw = bytearray((out / "best.ckpt").read_bytes())
    raw[8:12] = (99).to_bytes(4, "little")
    (tmp_path / "v99.ckpt").write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version 99, expected 1"):
        load_checkpoint(tmp_path / "v99.ckpt")


def test_ssl_checkpoint_loads_for_evaluation(ds, tmp_path):
    result = fit(ds, tiny_cfg(ssl=True, max_epochs=1), tmp_path)
    ckpt = load_checkpoint(tmp_path / "best.ckpt")
    head_keys = {k for k in ckpt.params if k.startswith("ssl_head.")}
    assert head_keys
    model, pipe, cfg = model_from_checkpoint(ckpt)
    assert model.ssl_head is None
    assert set(model.state_dict()) == set(ckpt.params) - head_keys
    full, _, _ = model_from_checkpoint(ckpt, eval_only=False)
    assert set(full.state_dict()) == set(ckpt.params)
    za0, _ = trainer.embed_split(result.model, ds.split("valid"), result.pipeline, cfg)
    za1, _ = trainer.embed_split(model, ds.split("valid"), pipe, cfg)
    assert np.array_equal(za0, za1)
