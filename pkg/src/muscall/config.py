"""Training configuration, named presets and JSON config files."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import AugmentConfig, MelConfig
from .encoders import AudioEncoderConfig, ConfigError, JointSpaceConfig, TextEncoderConfig

FLAG_NAMES = ("loss_weighting", "random_crop", "audio_aug", "attention_pool")


@dataclass
class TrainConfig:
    # optimisation
    batch_size: int = 32
    lr: float = 5e-4
    weight_decay: float = 0.2
    max_epochs: int = 20
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    precision: str = "float32"
    # ablation flags
    loss_weighting: bool = True
    random_crop: bool = True
    audio_aug: bool = True
    attention_pool: bool = True
    blur_pool: bool = True
    ssl: bool = False
    lambda_ssl: float = 0.3
    kappa: float = 0.005
    lw_use_distance: bool = False
    ssl_temperature: float = 0.5
    # audio
    sample_rate: int = 16000
    crop_seconds: float = 4.0
    n_mels: int = 64
    n_fft: int = 1024
    hop: int = 256
    aug_p: float = 0.3
    # model
    stem_channels: list[int] = field(default_factory=lambda: [8, 8, 16])
    stage_widths: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    attn_heads: int = 4
    text_depth: int = 4
    text_width: int = 64
    text_heads: int = 4
    max_len: int = 77
    bpe_vocab_size: int = 2000
    embed_dim: int = 128
    init_inv_tau: float = 1 / 0.07
    max_inv_tau: float = 100.0
    ssl_hidden: int = 256
    ssl_dim: int = 256

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.stem_channels = [int(c) for c in self.stem_channels]
        self.stage_widths = [int(c) for c in self.stage_widths]
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if not 0.0 <= self.lambda_ssl <= 1.0:
            raise ConfigError(f"lambda_ssl must lie in [0, 1], got {self.lambda_ssl}")
        if self.kappa <= 0 or self.ssl_temperature <= 0:
            raise ConfigError("kappa and ssl_temperature must be positive")
        if self.crop_seconds <= 0:
            raise ConfigError("crop_seconds must be positive")
        if self.crop_seconds * self.sample_rate < self.n_fft:
            raise ConfigError("crop is shorter than one analysis window")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError(f"Adam betas must lie in [0, 1), got {self.betas}")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def flags(self) -> dict[str, bool]:
        return {name: getattr(self, name) for name in FLAG_NAMES}

    def mel_config(self) -> MelConfig:
        return MelConfig(sample_rate=self.sample_rate, n_fft=self.n_fft, hop=self.hop, n_mels=self.n_mels)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(p=self.aug_p, seed=self.seed)

    def audio_config(self) -> AudioEncoderConfig:
        return AudioEncoderConfig(stem_channels=list(self.stem_channels), stage_widths=list(self.stage_widths),
                                  blur_pool=self.blur_pool, attention_pool=self.attention_pool,
                                  attn_heads=self.attn_heads)

    def text_config(self, vocab_size: int) -> TextEncoderConfig:
        return TextEncoderConfig(depth=self.text_depth, width=self.text_width, heads=self.text_heads,
                                 max_len=self.max_len, vocab_size=vocab_size)

    def joint_config(self) -> JointSpaceConfig:
        return JointSpaceConfig(embed_dim=self.embed_dim, init_inv_tau=self.init_inv_tau,
                                max_inv_tau=self.max_inv_tau, ssl_hidden=self.ssl_hidden, ssl_dim=self.ssl_dim)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["betas"] = list(self.betas)
        return out

    @classmethod
    def from_dict(cls, values: dict) -> TrainConfig:
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        defaults = cls()
        for key, value in values.items():
            _check_type(key, value, getattr(defaults, key))
        return cls(**values)

    def replace(self, **changes) -> TrainConfig:
        merged = self.to_dict()
        merged.update(changes)
        return TrainConfig.from_dict(merged)


def _check_type(key: str, value, default) -> None:
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, (list, tuple)) and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"config key {key!r} expects {type(default).__name__}, got {value!r}")


PRESETS: dict[str, dict] = {
    # laptop-scale profile: one CPU core, minutes per run. Loss weighting is
    # off because the toy corpus repeats captions within batches; see README.
    "desk": {"loss_weighting": False},
    "paper": {
        "batch_size": 256,
        "lr": 5e-5,
        "weight_decay": 0.2,
        "loss_weighting": True,
        "max_epochs": 150,
        "crop_seconds": 20.0,
        "n_mels": 128,
        "embed_dim": 512,
        "stem_channels": [32, 32, 64],
        "stage_widths": [256, 512, 1024, 2048],
        "attn_heads": 32,
        "text_depth": 4,
        "text_width": 512,
        "text_heads": 8,
        "bpe_vocab_size": 49405,
        "precision": "float32",
    },
}


def load_config(path=None, preset: str = "desk", overrides: dict | None = None) -> TrainConfig:
    """Resolve a preset, then values from an optional JSON file, then explicit overrides.

    The file is either a flat object of overrides, or ``{"presets": {name: {...}}}``
    whose entry for ``preset`` is applied (and may define new preset names).
    """
    doc: dict = {}
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    file_presets = doc.get("presets", {}) if "presets" in doc else {}
    if preset not in PRESETS and preset not in file_presets:
        raise ConfigError(f"unknown preset {preset!r}; available: {sorted(set(PRESETS) | set(file_presets))}")
    values = dict(PRESETS.get(preset, {}))
    if "presets" in doc:
        values.update(file_presets.get(preset, {}))
        values.update({k: v for k, v in doc.items() if k != "presets"})
    else:
        values.update(doc)
    values.update(overrides or {})
    return TrainConfig.from_dict(values)
