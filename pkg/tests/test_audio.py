import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from muscall.audio import (
    AudioClip,
    AugmentConfig,
    MelConfig,
    MelNormalizer,
    WavFormatError,
    augment,
    crop,
    decode_wav,
    encode_wav,
    load_mel_cache,
    mel_center_frequencies,
    mel_power,
    melspectrogram,
    save_mel_cache,
    write_wav,
)

SR = 16000


def _clip(seconds, sr=SR, value=None, seed=0):
    n = int(seconds * sr)
    x = np.full(n, value) if value is not None else np.random.default_rng(seed).uniform(-0.5, 0.5, n)
    return AudioClip(x, sr, "t")


# --- decode -----------------------------------------------------------------

def test_decode_16bit_scale(tmp_path):
    raw = np.array([16384, -32768, 0], dtype="<i2")
    wav = encode_wav(np.zeros(3), SR)
    wav = wav[:-6] + raw.tobytes()
    p = tmp_path / "a.wav"
    p.write_bytes(wav)
    clip = decode_wav(p)
    np.testing.assert_array_equal(clip.samples, [0.5, -1.0, 0.0])
    assert clip.sample_rate == SR


def test_decode_stereo_averages(tmp_path):
    p = tmp_path / "s.wav"
    p.write_bytes(encode_wav(np.array([[0.2, 0.4]]), SR, float_format=True))
    assert decode_wav(p).samples[0] == pytest.approx(0.3, abs=1e-7)


def test_decode_silence(tmp_path):
    p = tmp_path / "z.wav"
    write_wav(p, np.zeros(SR), SR)
    clip = decode_wav(p)
    assert len(clip.samples) == 16000 and not clip.samples.any()


@pytest.mark.parametrize("bits", [8, 16, 24, 32])
def test_decode_int_widths(tmp_path, bits):
    x = np.linspace(-0.9, 0.9, 101)
    p = tmp_path / f"w{bits}.wav"
    write_wav(p, x, 8000, bits=bits)
    tol = 2.0 / 2 ** bits
    np.testing.assert_allclose(decode_wav(p).samples, x, atol=tol)


def test_decode_errors_name_chunk(tmp_path):
    p = tmp_path / "bad.wav"
    p.write_bytes(b"RIFX0000WAVE")
    with pytest.raises(WavFormatError, match="RIFF"):
        decode_wav(p)
    good = bytearray(encode_wav(np.zeros(10), SR))
    good[20:22] = (0x55).to_bytes(2, "little")  # mp3 codec tag
    p.write_bytes(bytes(good))
    with pytest.raises(WavFormatError, match="fmt chunk"):
        decode_wav(p)
    p.write_bytes(encode_wav(np.zeros(10), SR)[:-4])
    with pytest.raises(WavFormatError, match="data"):
        decode_wav(p)


# --- crop -------------------------------------------------------------------

def test_center_crop_30s():
    x = np.arange(30 * 100, dtype=float)
    out = crop(AudioClip(x, 100), 20.0, "center")
    np.testing.assert_array_equal(out.samples, x[500:2500])


@pytest.mark.parametrize("mode", ["center", "random"])
def test_crop_identity_at_target_length(mode):
    clip = _clip(2.0, sr=100)
    out = crop(clip, 2.0, mode, np.random.default_rng(0))
    np.testing.assert_array_equal(out.samples, clip.samples)


def test_crop_pads_symmetrically():
    clip = AudioClip(np.ones(1000), 100)
    out = crop(clip, 20.0, "center")
    assert len(out.samples) == 2000
    assert not out.samples[:500].any() and not out.samples[1500:].any()
    assert out.samples[500:1500].all()


def test_random_crop_is_valid_window():
    x = np.arange(1000, dtype=float)
    out = crop(AudioClip(x, 100), 3.0, "random", np.random.default_rng(3))
    start = int(out.samples[0])
    np.testing.assert_array_equal(out.samples, x[start:start + 300])
    with pytest.raises(ValueError):
        crop(AudioClip(x, 100), 3.0, "random")


# --- augment ----------------------------------------------------------------

def test_augment_p0_identity():
    clip = _clip(0.5)
    out = augment(clip, AugmentConfig(p=0.0), np.random.default_rng(0))
    np.testing.assert_array_equal(out.samples, clip.samples)


def _only(name, **kw):
    enabled = {k: k == name for k in ("gain", "noise", "pitch", "polarity")}
    return AugmentConfig(p=1.0, enabled=enabled, **kw)


def test_gain_plus_6db():
    out = augment(_clip(0.1, value=0.1), _only("gain", gain_db_range=(6.0, 6.0)), np.random.default_rng(0))
    np.testing.assert_allclose(out.samples, 0.1 * 10 ** (6 / 20), rtol=1e-12)
    assert out.samples[0] == pytest.approx(0.19953, abs=1e-5)


def test_noise_snr_20db():
    rng = np.random.default_rng(1)
    x = rng.choice([-1.0, 1.0], size=16000)  # unit power
    out = augment(AudioClip(x, SR), _only("noise", snr_db_range=(20.0, 20.0)), rng)
    noise_power = np.mean((out.samples - x) ** 2)
    assert noise_power == pytest.approx(0.01, rel=0.1)


def test_polarity_and_length_preserved():
    clip = _clip(0.3)
    out = augment(clip, _only("polarity"), np.random.default_rng(0))
    np.testing.assert_array_equal(out.samples, -clip.samples)
    out = augment(clip, _only("pitch", pitch_semitone_range=(2.0, 2.0)), np.random.default_rng(0))
    assert len(out.samples) == len(clip.samples)


def test_pitch_shift_moves_spectral_peak():
    t = np.arange(SR) / SR
    clip = AudioClip(0.5 * np.sin(2 * np.pi * 440 * t), SR)
    out = augment(clip, _only("pitch", pitch_semitone_range=(12.0, 12.0)), np.random.default_rng(0))
    spec = np.abs(np.fft.rfft(out.samples[:SR // 2]))
    peak_hz = np.argmax(spec) * SR / (SR // 2)
    assert peak_hz == pytest.approx(880, abs=4)


def test_augment_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(p=1.5)
    with pytest.raises(ValueError):
        AugmentConfig(gain_db_range=(3, -3))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 31), p=st.floats(0, 1))
def test_augment_reproducible_and_bounded(seed, p):
    clip = _clip(0.2, seed=seed % 97)
    cfg = AugmentConfig(p=p, gain_db_range=(-6, 12))
    a = augment(clip, cfg, np.random.default_rng(seed))
    b = augment(clip, cfg, np.random.default_rng(seed))
    assert a.samples.tobytes() == b.samples.tobytes()
    assert np.all(np.isfinite(a.samples)) and np.abs(a.samples).max() <= 1.5


# --- mel --------------------------------------------------------------------

def test_sine_440_peaks_at_nearest_center():
    cfg = MelConfig()
    t = np.arange(SR) / SR
    mel = melspectrogram(AudioClip(0.5 * np.sin(2 * np.pi * 440 * t), SR), cfg)
    centers = mel_center_frequencies(cfg)
    assert np.argmax(mel.bins.mean(axis=1)) == np.argmin(np.abs(centers - 440.0))


def test_silence_is_log_offset():
    mel = melspectrogram(AudioClip(np.zeros(SR), SR))
    np.testing.assert_allclose(mel.bins, np.log(1e-5))
    assert mel.bins[0, 0] == pytest.approx(-11.5129, abs=1e-4)


def test_doubling_amplitude_quadruples_power():
    x = np.random.default_rng(0).uniform(-0.4, 0.4, 8000)
    cfg = MelConfig()
    np.testing.assert_allclose(mel_power(2 * x, cfg), 4 * mel_power(x, cfg), rtol=1e-10)


@pytest.mark.parametrize("extra", range(0, 10 * 256 + 1, 97))
def test_frame_count_formula(extra):
    cfg = MelConfig()
    n = cfg.n_fft + extra
    mel = melspectrogram(AudioClip(np.zeros(n) + 0.01, SR), cfg)
    assert mel.n_frames == 1 + (n - cfg.n_fft) // cfg.hop
    assert mel.bins.shape == (128, mel.n_frames)


def test_mel_errors():
    with pytest.raises(ValueError, match="shorter"):
        melspectrogram(AudioClip(np.zeros(100), SR))
    with pytest.raises(ValueError, match="resample"):
        melspectrogram(AudioClip(np.zeros(4000), 8000))


def test_normalizer_and_cache(tmp_path):
    cfg = MelConfig(n_mels=16)
    mels = [melspectrogram(_clip(0.5, seed=s), cfg).bins for s in range(3)]
    norm = MelNormalizer.fit(mels)
    z = np.concatenate([norm(m) for m in mels], axis=1)
    np.testing.assert_allclose(z.mean(axis=1), 0, atol=1e-9)
    np.testing.assert_allclose(z.std(axis=1), 1, atol=1e-9)
    mel = melspectrogram(_clip(0.5), cfg)
    save_mel_cache(tmp_path / "m.bin", mel, cfg)
    back = load_mel_cache(tmp_path / "m.bin", cfg)
    assert back.bins.tobytes() == mel.bins.tobytes()
    with pytest.raises(ValueError):
        load_mel_cache(tmp_path / "m.bin", MelConfig(n_mels=32))
