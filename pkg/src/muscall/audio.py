"""Waveform I/O, cropping, augmentation and log-mel features."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numcore import serialize


class WavFormatError(ValueError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    source_id: str = ""

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if len(self.samples) == 0:
            raise ValueError("audio clip has no samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelConfig:
    sample_rate: int = 16000
    n_fft: int = 1024
    hop: int = 256
    n_mels: int = 128
    fmin: float = 0.0
    fmax: float | None = None
    log_offset: float = 1e-5

    def n_frames(self, n_samples: int) -> int:
        return 1 + (n_samples - self.n_fft) // self.hop


@dataclass
class MelSpec:
    bins: np.ndarray  # (n_mels, n_frames)
    n_mels: int
    hop: int
    sample_rate: int

    @property
    def n_frames(self) -> int:
        return self.bins.shape[1]


@dataclass
class AugmentConfig:
    p: float = 0.3
    gain_db_range: tuple[float, float] = (-3.0, 3.0)
    snr_db_range: tuple[float, float] = (15.0, 30.0)
    pitch_semitone_range: tuple[float, float] = (-1.0, 1.0)
    enabled: dict[str, bool] = field(default_factory=lambda: {
        "gain": True, "noise": True, "pitch": True, "polarity": True})
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"augmentation probability {self.p} outside [0, 1]")
        for name in ("gain_db_range", "snr_db_range", "pitch_semitone_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is not ordered: ({lo}, {hi})")
            setattr(self, name, (float(lo), float(hi)))


# --- WAV ---------------------------------------------------------------------

_PCM, _FLOAT, _EXTENSIBLE = 1, 3, 0xFFFE


def _decode_pcm(raw: bytes, bits: int, fmt: int) -> np.ndarray:
    if fmt == _FLOAT:
        if bits == 32:
            return np.frombuffer(raw, dtype="<f4").astype(np.float64)
        if bits == 64:
            return np.frombuffer(raw, dtype="<f8").astype(np.float64)
        raise WavFormatError(f"fmt chunk: unsupported float width {bits}")
    if bits == 8:
        return (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    if bits == 16:
        return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if bits == 24:
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        v = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        v = np.where(v >= 1 << 23, v - (1 << 24), v)
        return v.astype(np.float64) / float(1 << 23)
    if bits == 32:
        return np.frombuffer(raw, dtype="<i4").astype(np.float64) / 2147483648.0
    raise WavFormatError(f"fmt chunk: unsupported PCM width {bits}")


def decode_wav(path) -> AudioClip:
    """Read a RIFF/WAVE file into a mono clip scaled to [-1, 1]."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError(f"RIFF header: {path} is not a RIFF/WAVE file")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        size = struct.unpack("<I", data[pos + 4:pos + 8])[0]
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise WavFormatError(f"chunk {cid!r}: truncated ({len(body)} of {size} bytes)")
        if cid == b"fmt ":
            if size < 16:
                raise WavFormatError(f"fmt chunk: too short ({size} bytes)")
            tag, channels, rate, _, align, bits = struct.unpack("<HHIIHH", body[:16])
            if tag == _EXTENSIBLE and size >= 40:
                tag = struct.unpack("<H", body[24:26])[0]
            if tag not in (_PCM, _FLOAT):
                raise WavFormatError(f"fmt chunk: unsupported codec tag {tag:#x}")
            if channels < 1 or rate <= 0:
                raise WavFormatError(f"fmt chunk: invalid channels={channels} rate={rate}")
            fmt = (tag, channels, rate, bits)
        elif cid == b"data":
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise WavFormatError("fmt chunk: missing")
    if payload is None:
        raise WavFormatError("data chunk: missing")
    tag, channels, rate, bits = fmt
    frame_bytes = channels * bits // 8
    if frame_bytes == 0 or len(payload) % frame_bytes:
        raise WavFormatError(f"data chunk: {len(payload)} bytes is not a whole number of frames")
    samples = _decode_pcm(payload, bits, tag).reshape(-1, channels).mean(axis=1)
    return AudioClip(np.clip(samples, -1.0, 1.0), int(rate), Path(path).stem)


def encode_wav(samples: np.ndarray, sample_rate: int, bits: int = 16, float_format: bool = False) -> bytes:
    """Serialize samples (mono 1-D or (n, channels)) as a RIFF/WAVE byte string."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    channels = x.shape[1]
    x = np.clip(x, -1.0, 1.0).reshape(-1)
    if float_format:
        bits, tag = 32, _FLOAT
        raw = x.astype("<f4").tobytes()
    else:
        tag = _PCM
        if bits == 8:
            raw = np.clip(np.round(x * 128 + 128), 0, 255).astype(np.uint8).tobytes()
        elif bits == 16:
            raw = np.clip(np.round(x * 32768), -32768, 32767).astype("<i2").tobytes()
        elif bits == 24:
            v = np.clip(np.round(x * (1 << 23)), -(1 << 23), (1 << 23) - 1).astype(np.int32)
            raw = np.stack([v & 0xFF, (v >> 8) & 0xFF, (v >> 16) & 0xFF], axis=1).astype(np.uint8).tobytes()
        elif bits == 32:
            raw = np.clip(np.round(x * 2147483648.0), -2147483648, 2147483647).astype("<i4").tobytes()
        else:
            raise ValueError(f"unsupported bit depth {bits}")
    align = channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, channels, sample_rate, sample_rate * align, align, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(raw)) + raw
    if len(raw) & 1:
        body += b"\x00"
    return b"RIFF" + struct.pack("<I", len(body)) + body


def write_wav(path, samples: np.ndarray, sample_rate: int, bits: int = 16) -> None:
    Path(path).write_bytes(encode_wav(samples, sample_rate, bits))


# --- cropping & augmentation ------------------------------------------------

def crop(clip: AudioClip, duration_s: float, mode: str = "center",
         rng: np.random.Generator | None = None) -> AudioClip:
    if duration_s <= 0:
        raise ValueError("crop duration must be positive")
    n = int(round(duration_s * clip.sample_rate))
    x = clip.samples
    if len(x) <= n:
        left = (n - len(x)) // 2
        out = np.zeros(n, dtype=x.dtype)
        out[left:left + len(x)] = x
        return AudioClip(out, clip.sample_rate, clip.source_id)
    if mode == "center":
        start = (len(x) - n) // 2
    elif mode == "random":
        if rng is None:
            raise ValueError("random crop requires an rng")
        start = int(rng.integers(0, len(x) - n + 1))
    else:
        raise ValueError(f"unknown crop mode {mode!r}")
    return AudioClip(x[start:start + n].copy(), clip.sample_rate, clip.source_id)


def _resample_shift(x: np.ndarray, semitones: float) -> np.ndarray:
    # reading the input faster raises pitch; tempo changes along with it
    ratio = 2.0 ** (semitones / 12.0)
    pos = np.arange(len(x)) * ratio
    return np.interp(pos, np.arange(len(x)), x, right=0.0)


AUG_CLIP = 1.5


def augment(clip: AudioClip, cfg: AugmentConfig, rng: np.random.Generator) -> AudioClip:
    """Apply each enabled transform with independent probability ``cfg.p``.

    All random draws happen whether or not a transform fires, so the stream
    position after the call does not depend on which transforms were applied.
    The result is clipped to [-1.5, 1.5].
    """
    x = np.array(clip.samples, dtype=np.float64)
    fire = rng.random(4) < cfg.p
    semitones = rng.uniform(*cfg.pitch_semitone_range)
    gain_db = rng.uniform(*cfg.gain_db_range)
    snr_db = rng.uniform(*cfg.snr_db_range)
    noise = rng.standard_normal(len(x))
    on = cfg.enabled
    if not fire.any():
        return AudioClip(x, clip.sample_rate, clip.source_id)
    if on.get("pitch", True) and fire[0]:
        x = _resample_shift(x, semitones)
    if on.get("gain", True) and fire[1]:
        x = x * 10.0 ** (gain_db / 20.0)
    if on.get("noise", True) and fire[2]:
        power = float(np.mean(x * x))
        x = x + noise * np.sqrt(power / 10.0 ** (snr_db / 10.0))
    if on.get("polarity", True) and fire[3]:
        x = -x
    return AudioClip(np.clip(x, -AUG_CLIP, AUG_CLIP), clip.sample_rate, clip.source_id)


# --- mel features -----------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: MelConfig) -> np.ndarray:
    fmax = cfg.fmax if cfg.fmax is not None else cfg.sample_rate / 2
    points = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(fmax), cfg.n_mels + 2))
    return points[1:-1]


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular HTK-scale filters with unit peak, shape (n_mels, n_fft // 2 + 1)."""
    fmax = cfg.fmax if cfg.fmax is not None else cfg.sample_rate / 2
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(fmax), cfg.n_mels + 2))
    freqs = np.linspace(0.0, cfg.sample_rate / 2, cfg.n_fft // 2 + 1)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


_FB_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def _analysis(cfg: MelConfig):
    key = (cfg.sample_rate, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.fmax)
    if key not in _FB_CACHE:
        n = np.arange(cfg.n_fft)
        window = 0.5 - 0.5 * np.cos(2 * np.pi * n / cfg.n_fft)
        _FB_CACHE[key] = (window, mel_filterbank(cfg))
    return _FB_CACHE[key]


def mel_power(samples: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """Pre-log mel energies for one waveform ``(n,)`` or a stack ``(b, n)``."""
    x = np.asarray(samples, dtype=np.float64)
    if x.shape[-1] < cfg.n_fft:
        raise ValueError(f"clip of {x.shape[-1]} samples is shorter than one {cfg.n_fft}-sample window")
    window, fb = _analysis(cfg)
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.n_fft, axis=-1)[..., ::cfg.hop, :]
    spec = np.fft.rfft(frames * window, axis=-1)
    power = spec.real ** 2 + spec.imag ** 2
    return np.swapaxes(power @ fb.T, -1, -2)


def melspectrogram(clip: AudioClip, cfg: MelConfig | None = None) -> MelSpec:
    """Power STFT (periodic Hann) -> HTK mel filterbank -> log(x + offset)."""
    cfg = cfg or MelConfig()
    if clip.sample_rate != cfg.sample_rate:
        raise ValueError(f"clip rate {clip.sample_rate} Hz != feature rate {cfg.sample_rate} Hz; resample first")
    bins = np.log(mel_power(clip.samples, cfg) + cfg.log_offset)
    return MelSpec(bins, cfg.n_mels, cfg.hop, cfg.sample_rate)


def log_mel_batch(waves: np.ndarray, cfg: MelConfig) -> np.ndarray:
    """Log-mel for a (b, n) stack of equal-length waveforms -> (b, n_mels, n_frames)."""
    return np.log(mel_power(waves, cfg) + cfg.log_offset)


@dataclass
class MelNormalizer:
    """Per-mel-bin standardisation with statistics from the training split."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, mels: list[np.ndarray] | np.ndarray) -> MelNormalizer:
        stacked = np.concatenate([np.asarray(m) for m in mels], axis=1)  # (n_mels, total frames)
        mean = stacked.mean(axis=1)
        std = stacked.std(axis=1)
        return cls(mean, np.maximum(std, 1e-5))

    def __call__(self, mel: np.ndarray) -> np.ndarray:
        return (mel - self.mean[:, None]) / self.std[:, None]


def save_mel_cache(path, mel: MelSpec, cfg: MelConfig) -> None:
    """Cached features: flat-array file plus a ``.json`` sidecar with the mel settings."""
    path = Path(path)
    serialize.save_array(path, mel.bins)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(asdict(cfg), indent=2))


def load_mel_cache(path, cfg: MelConfig | None = None) -> MelSpec:
    path = Path(path)
    stored = MelConfig(**json.loads(path.with_suffix(path.suffix + ".json").read_text()))
    if cfg is not None and asdict(cfg) != asdict(stored):
        raise ValueError(f"cached features were computed with {asdict(stored)}, expected {asdict(cfg)}")
    bins = serialize.load_array(path)
    return MelSpec(bins, stored.n_mels, stored.hop, stored.sample_rate)
