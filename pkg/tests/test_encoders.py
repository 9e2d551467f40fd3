import numpy as np
import pytest

from muscall.encoders import (
    AttentionPool,
    AudioEncoder,
    AudioEncoderConfig,
    ConfigError,
    JointSpaceConfig,
    MusCALL,
    TextEncoder,
    TextEncoderConfig,
)
from muscall.numcore import Tensor, finite_difference_check, ops

TINY_AUDIO = AudioEncoderConfig(stem_channels=[2, 2, 4], stage_widths=[4, 8], attn_heads=2)
TINY_TEXT = TextEncoderConfig(depth=1, width=8, heads=2, max_len=12, vocab_size=20)


# --- blur pooling -----------------------------------------------------------

def test_blur_pool_preserves_constant():
    x = np.full((1, 6, 7, 3), 2.5)
    np.testing.assert_allclose(ops.blur_pool2d(Tensor(x)).data, 2.5, atol=1e-12)


def test_blur_pool_impulse():
    x = np.zeros((1, 5, 5, 1))
    x[0, 2, 2, 0] = 1.0
    out = ops.blur_pool2d(Tensor(x)).data
    assert out.shape == (1, 3, 3, 1)
    assert out[0, 1, 1, 0] == pytest.approx(4 / 16)


def test_blur_pool_shift_by_two():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 20, 20, 2))
    shifted = np.roll(x, 2, axis=1)
    a = ops.blur_pool2d(Tensor(x)).data
    b = ops.blur_pool2d(Tensor(shifted)).data
    np.testing.assert_allclose(b[:, 3:8], a[:, 2:7], atol=1e-12)


def test_blur_pool_too_small():
    with pytest.raises(ValueError, match="3x3"):
        ops.blur_pool2d(Tensor(np.zeros((1, 2, 5, 1))))


# --- attention pooling ------------------------------------------------------

def _identity_pool(d, heads):
    pool = AttentionPool(d, heads, np.random.default_rng(0))
    for lin in (pool.v, pool.out):
        lin.weight.data = np.eye(d)
        lin.bias.data = np.zeros(d)
    return pool


def test_attention_pool_identical_tokens():
    v = np.array([0.3, -1.2, 2.0, 0.5])
    tokens = np.tile(v, (1, 5, 1))
    out = _identity_pool(4, 2)(Tensor(tokens)).data
    np.testing.assert_allclose(out[0], v, atol=1e-12)


def test_attention_pool_permutation_invariant():
    rng = np.random.default_rng(1)
    pool = AttentionPool(8, 4, rng)
    tokens = rng.normal(size=(2, 6, 8))
    perm = rng.permutation(6)
    a = pool(Tensor(tokens)).data
    b = pool(Tensor(tokens[:, perm])).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_attention_pool_single_token():
    pool = AttentionPool(4, 2, np.random.default_rng(2))
    assert pool(Tensor(np.ones((3, 1, 4)))).shape == (3, 4)


def test_attention_pool_bad_heads():
    with pytest.raises(ConfigError):
        AttentionPool(6, 4, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        AudioEncoderConfig(stage_widths=[8, 10], attn_heads=4)


# --- audio encoder ----------------------------------------------------------

def _mel(b=2, h=32, w=40, seed=0):
    return np.random.default_rng(seed).normal(size=(b, h, w))


def test_audio_encoder_deterministic():
    enc = AudioEncoder(TINY_AUDIO, np.random.default_rng(0))
    m = _mel()
    assert enc(m).data.tobytes() == enc(m).data.tobytes()


def test_audio_encoder_mean_pool_fallback():
    cfg = AudioEncoderConfig(stem_channels=[2, 2, 4], stage_widths=[4, 8], attn_heads=2, attention_pool=False)
    enc = AudioEncoder(cfg, np.random.default_rng(0))
    m = _mel()
    fmap = enc.feature_map(m).data
    np.testing.assert_array_equal(enc(m).data, fmap.reshape(2, -1, 8).mean(axis=1))
    assert enc.pool_calls == {"mean": 1}


def test_audio_encoder_frame_count_independence():
    enc = AudioEncoder(TINY_AUDIO, np.random.default_rng(0))
    short, long = _mel(w=40), _mel(w=80)
    assert enc.feature_map(short).shape[2] != enc.feature_map(long).shape[2]
    assert enc(short).shape == enc(long).shape == (2, 8)


def test_audio_encoder_too_small():
    enc = AudioEncoder(AudioEncoderConfig(), np.random.default_rng(0))
    need = enc.min_input_size()
    with pytest.raises(ValueError, match=f"at least {need}x{need}"):
        enc(_mel(h=need - 1, w=100))
    assert enc(_mel(b=1, h=need, w=need)).shape == (1, 256)


def test_audio_encoder_no_blur_subsamples():
    cfg = AudioEncoderConfig(stem_channels=[2, 2, 4], stage_widths=[4, 8], attn_heads=2, blur_pool=False)
    enc = AudioEncoder(cfg, np.random.default_rng(0))
    assert enc(_mel()).shape == (2, 8)


# --- text encoder -----------------------------------------------------------

def test_text_pad_region_ignored():
    enc = TextEncoder(TINY_TEXT, np.random.default_rng(0))
    ids = np.array([[17, 3, 4, 5, 18, 16, 16, 16, 16, 16, 16, 16]])
    noisy = ids.copy()
    noisy[0, 5:] = [1, 2, 9, 9, 0, 7, 3]
    a = enc(ids, [4]).data
    b = enc(noisy, [4]).data
    assert a.tobytes() == b.tobytes()


def test_text_batch_mates_do_not_leak():
    enc = TextEncoder(TINY_TEXT, np.random.default_rng(0))
    ids = np.array([[17, 3, 4, 18, 16, 16, 16, 16, 16, 16, 16, 16],
                    [17, 3, 4, 5, 6, 7, 8, 9, 18, 16, 16, 16]])
    both = enc(ids, [3, 8]).data
    alone = enc(ids[:1], [3]).data
    np.testing.assert_allclose(both[0], alone[0], atol=1e-12)


def test_text_positional_sensitivity():
    enc = TextEncoder(TINY_TEXT, np.random.default_rng(0))
    ids = np.array([[17, 3, 4, 5, 6, 18] + [16] * 6])
    swapped = ids.copy()
    swapped[0, 1:5] = [6, 5, 4, 3]
    assert not np.allclose(enc(ids, [5]).data, enc(swapped, [5]).data)


def test_text_config_errors():
    with pytest.raises(ConfigError):
        TextEncoderConfig(depth=0)
    enc = TextEncoder(TINY_TEXT, np.random.default_rng(0))
    with pytest.raises(ValueError, match="vocabulary"):
        enc(np.array([[17, 25, 18]]), [2])


# --- projection -------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_model():
    return MusCALL(TINY_AUDIO, TINY_TEXT, JointSpaceConfig(embed_dim=6), seed=0)


def test_projection_unit_norm_and_scale_invariance(tiny_model):
    feats = Tensor(np.random.default_rng(0).normal(size=(5, 8)))
    z = tiny_model.project(feats, "audio").data
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-6)
    z5 = tiny_model.project(ops.mul(feats, 5.0), "audio").data
    np.testing.assert_allclose(z, z5, atol=1e-12)


def test_projection_zero_feature_maps_to_zero(tiny_model):
    z = tiny_model.project(Tensor(np.zeros((1, 8))), "text").data
    assert np.all(z == 0.0)


def test_full_forward_deterministic(tiny_model):
    m = _mel()
    ids = np.array([[17, 3, 4, 18] + [16] * 8] * 2)
    assert tiny_model.encode_audio(m).data.tobytes() == tiny_model.encode_audio(m).data.tobytes()
    assert tiny_model.encode_text(ids, [3, 3]).data.tobytes() == tiny_model.encode_text(ids, [3, 3]).data.tobytes()


def test_logit_scale_clamp():
    m = MusCALL(TINY_AUDIO, TINY_TEXT, JointSpaceConfig(embed_dim=6))
    assert m.inv_tau().item() == pytest.approx(1 / 0.07)
    m.logit_scale.data = np.array(10.0)
    m.clamp_logit_scale()
    assert m.inv_tau().item() == pytest.approx(100.0)


# --- gradient checks on tiny configs ----------------------------------------

def _param_check(model, name, loss_fn):
    *path, attr = name.split(".")
    owner = model
    for part in path:
        owner = owner[int(part)] if part.isdigit() else getattr(owner, part)
    original = getattr(owner, attr)

    def f(x):
        setattr(owner, attr, x)
        return loss_fn()

    try:
        return finite_difference_check(f, Tensor(original.data))
    finally:
        setattr(owner, attr, original)


def test_audio_encoder_gradients(tiny_model):
    mel = _mel(b=2, h=32, w=36, seed=4)
    c = Tensor(np.random.default_rng(5).normal(size=(2, 6)))
    loss = lambda: ops.sum(ops.mul(tiny_model.encode_audio(mel), c))
    for name in ["audio_encoder.stem.0.weight", "audio_encoder.stages.1.conv2.weight",
                 "audio_encoder.stages.1.shortcut.weight", "audio_encoder.pool.q.weight",
                 "audio_projection.weight"]:
        assert _param_check(tiny_model, name, loss) <= 1e-4, name
    assert finite_difference_check(lambda x: ops.sum(ops.mul(tiny_model.encode_audio(x), c)), Tensor(mel)) <= 1e-4


def test_text_encoder_gradients(tiny_model):
    ids = np.array([[17, 3, 4, 5, 18] + [16] * 7, [17, 9, 18] + [16] * 9])
    eot = [4, 2]
    c = Tensor(np.random.default_rng(6).normal(size=(2, 6)))
    loss = lambda: ops.sum(ops.mul(tiny_model.encode_text(ids, eot), c))
    for name in ["text_encoder.token_embedding.weight", "text_encoder.positional_embedding.weight",
                 "text_encoder.blocks.0.qkv.weight", "text_encoder.blocks.0.fc.weight",
                 "text_encoder.blocks.0.ln1.gain", "text_encoder.ln_final.bias", "text_projection.weight"]:
        assert _param_check(tiny_model, name, loss) <= 1e-4, name


def test_parameter_names_unique(tiny_model):
    params = tiny_model.parameters()
    names = [p.name for p in params]
    assert len(names) == len(set(names))
    assert "logit_scale" in names
    decay = {p.name: p.decay for p in params}
    assert not decay["logit_scale"] and not decay["text_encoder.ln_final.gain"]
    assert decay["audio_projection.weight"]
