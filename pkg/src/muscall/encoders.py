"""Audio and text encoders, attention pooling and the joint-space projections."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .numcore import Conv2d, Embedding, LayerNorm, Linear, Module, Parameter, Tensor, ops


class ConfigError(ValueError):
    pass


@dataclass
class AudioEncoderConfig:
    stem_channels: list[int] = field(default_factory=lambda: [16, 16, 32])
    stage_widths: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    blur_pool: bool = True
    attention_pool: bool = True
    attn_heads: int = 4

    def __post_init__(self):
        if len(self.stem_channels) != 3:
            raise ConfigError("stem needs exactly three convolution widths")
        if not self.stage_widths or min(self.stem_channels + self.stage_widths) <= 0:
            raise ConfigError("all widths must be positive and at least one stage is required")
        if self.stage_widths[-1] % self.attn_heads:
            raise ConfigError(f"pool width {self.stage_widths[-1]} not divisible by {self.attn_heads} heads")

    @property
    def feature_dim(self) -> int:
        return self.stage_widths[-1]


@dataclass
class TextEncoderConfig:
    depth: int = 4
    width: int = 128
    heads: int = 4
    max_len: int = 77
    vocab_size: int = 2003

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"text encoder depth must be >= 1, got {self.depth}")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by {self.heads} heads")

    @property
    def feature_dim(self) -> int:
        return self.width


@dataclass
class JointSpaceConfig:
    embed_dim: int = 128
    init_inv_tau: float = 1 / 0.07
    max_inv_tau: float = 100.0
    ssl_hidden: int = 256
    ssl_dim: int = 256

    def __post_init__(self):
        if self.embed_dim <= 0:
            raise ConfigError("embed_dim must be positive")
        if self.max_inv_tau <= self.init_inv_tau:
            raise ConfigError("logit-scale clamp must exceed its initial value")


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return ops.transpose(ops.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


class AttentionPool(Module):
    """Summarise ``n`` tokens by attending from their mean, appended as token ``n + 1``.

    No positional encoding is used, so the result is invariant to token order.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, out_dim: int | None = None):
        if dim % heads:
            raise ConfigError(f"attention width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, out_dim or dim, rng)

    def forward(self, tokens: Tensor) -> Tensor:
        b, n, d = tokens.shape
        if n < 1:
            raise ValueError("attention pooling needs at least one token")
        summary = ops.mean(tokens, axis=1, keepdims=True)
        seq = ops.concat([tokens, summary], axis=1)
        q = _split_heads(self.q(summary), self.heads)
        k = _split_heads(self.k(seq), self.heads)
        v = _split_heads(self.v(seq), self.heads)
        scores = ops.mul(ops.matmul(q, ops.swapaxes(k, -1, -2)), 1.0 / math.sqrt(d // self.heads))
        pooled = _merge_heads(ops.matmul(ops.softmax(scores, axis=-1), v))
        return ops.reshape(self.out(pooled), (b, -1))


class ResidualBlock(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.conv1 = Conv2d(c_in, c_out, 3, rng)
        self.conv2 = Conv2d(c_out, c_out, 3, rng)
        self.conv2.weight.data *= 0.5
        self.shortcut = Conv2d(c_in, c_out, 1, rng, bias=False) if c_in != c_out else None

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv2(ops.relu(self.conv1(x)))
        skip = x if self.shortcut is None else self.shortcut(x)
        return ops.relu(ops.add(skip, y))


class AudioEncoder(Module):
    """Log-mel (B, n_mels, n_frames) -> feature vector (B, stage_widths[-1]).

    Three-conv stem (first conv strided) and 2x2 average pooling, then
    residual stages separated by 2x downsampling (binomial blur pooling when
    enabled, plain subsampling otherwise), then attention or mean pooling
    over the flattened spatial positions.
    """

    def __init__(self, cfg: AudioEncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        c0, c1, c2 = cfg.stem_channels
        self.stem = [Conv2d(1, c0, 3, rng, stride=2), Conv2d(c0, c1, 3, rng), Conv2d(c1, c2, 3, rng)]
        widths = [c2, *cfg.stage_widths]
        self.stages = [ResidualBlock(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.pool = AttentionPool(cfg.feature_dim, cfg.attn_heads, rng) if cfg.attention_pool else None
        self.pool_calls: Counter = Counter()
        self._min_size = None

    def _downsample(self, x: Tensor) -> Tensor:
        if self.cfg.blur_pool:
            return ops.blur_pool2d(x)
        return x[:, ::2, ::2, :]

    def min_input_size(self) -> int:
        if self._min_size is None:
            self._min_size = next(size for size in range(1, 1 << 16)
                                  if _survives(size, len(self.cfg.stage_widths), self.cfg.blur_pool))
        return self._min_size

    def feature_map(self, mel) -> Tensor:
        x = mel if isinstance(mel, Tensor) else Tensor(mel)
        if x.ndim == 2:
            x = ops.reshape(x, (1, *x.shape))
        b, h, w = x.shape
        need = self.min_input_size()
        if h < need or w < need:
            raise ValueError(f"mel input {h}x{w} is too small; this encoder needs at least {need}x{need}")
        x = ops.reshape(x, (b, h, w, 1))
        for conv in self.stem:
            x = ops.relu(conv(x))
        x = ops.avg_pool2d(x, 2)
        for i, stage in enumerate(self.stages):
            if i:
                x = self._downsample(x)
            x = stage(x)
        return x

    def forward(self, mel) -> Tensor:
        fmap = self.feature_map(mel)
        b, h, w, c = fmap.shape
        tokens = ops.reshape(fmap, (b, h * w, c))
        if self.pool is None:
            self.pool_calls["mean"] += 1
            return ops.mean(tokens, axis=1)
        self.pool_calls["attention"] += 1
        return self.pool(tokens)


def _survives(size: int, n_stages: int, blur: bool) -> bool:
    size = (size - 1) // 2 + 1  # strided stem conv
    size //= 2
    if size < 1:
        return False
    for _ in range(n_stages - 1):
        if blur and size < 3:
            return False
        size = (size - 1) // 2 + 1
    return size >= 1


class TransformerBlock(Module):
    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.ln1 = LayerNorm(width)
        self.qkv = Linear(width, 3 * width, rng)
        self.proj = Linear(width, width, rng)
        self.ln2 = LayerNorm(width)
        self.fc = Linear(width, 4 * width, rng)
        self.fc_out = Linear(4 * width, width, rng)

    def forward(self, x: Tensor, mask: np.ndarray) -> Tensor:
        b, n, d = x.shape
        qkv = self.qkv(self.ln1(x))
        q, k, v = (_split_heads(qkv[:, :, i * d:(i + 1) * d], self.heads) for i in range(3))
        scores = ops.add(ops.mul(ops.matmul(q, ops.swapaxes(k, -1, -2)), 1.0 / math.sqrt(d // self.heads)), mask)
        x = ops.add(x, self.proj(_merge_heads(ops.matmul(ops.softmax(scores, axis=-1), v))))
        return ops.add(x, self.fc_out(ops.gelu(self.fc(self.ln2(x)))))


class TextEncoder(Module):
    """Causal pre-norm transformer; the feature is read at the end-token position."""

    def __init__(self, cfg: TextEncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.token_embedding = Embedding(cfg.vocab_size, cfg.width, rng)
        self.positional_embedding = Embedding(cfg.max_len, cfg.width, rng, std=0.01)
        self.blocks = [TransformerBlock(cfg.width, cfg.heads, rng) for _ in range(cfg.depth)]
        self.ln_final = LayerNorm(cfg.width)

    def forward(self, ids: np.ndarray, eot_index: np.ndarray) -> Tensor:
        ids = np.atleast_2d(np.asarray(ids))
        eot_index = np.atleast_1d(np.asarray(eot_index))
        if ids.shape[1] > self.cfg.max_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_len {self.cfg.max_len}")
        if ids.max() >= self.cfg.vocab_size or ids.min() < 0:
            raise ValueError(f"token id {ids.max()} outside vocabulary of {self.cfg.vocab_size}")
        # causal attention: nothing after the end token can reach it
        n = int(eot_index.max()) + 1
        ids = ids[:, :n]
        x = ops.add(self.token_embedding(ids), self.positional_embedding.weight[:n])
        mask = np.triu(np.full((n, n), -1e9, dtype=x.dtype), k=1)
        for block in self.blocks:
            x = block(x, mask)
        x = self.ln_final(x)
        return x[np.arange(len(ids)), eot_index]


class ProjectionHead(Module):
    """Two-layer MLP (hidden ReLU) for the self-supervised audio branch."""

    def __init__(self, n_in: int, hidden: int, n_out: int, rng: np.random.Generator):
        self.fc1 = Linear(n_in, hidden, rng)
        self.fc2 = Linear(hidden, n_out, rng)

    def forward(self, x: Tensor) -> Tensor:
        return ops.l2_normalize(self.fc2(ops.relu(self.fc1(x))))


class MusCALL(Module):
    """Dual encoder with linear (bias-free) projections into a shared unit-norm space."""

    def __init__(self, audio_cfg: AudioEncoderConfig, text_cfg: TextEncoderConfig,
                 joint_cfg: JointSpaceConfig, seed: int = 0, ssl: bool = False):
        rng = np.random.default_rng(seed)
        self.audio_cfg, self.text_cfg, self.joint_cfg = audio_cfg, text_cfg, joint_cfg
        self.audio_encoder = AudioEncoder(audio_cfg, rng)
        self.text_encoder = TextEncoder(text_cfg, rng)
        self.audio_projection = Linear(audio_cfg.feature_dim, joint_cfg.embed_dim, rng, bias=False)
        self.text_projection = Linear(text_cfg.feature_dim, joint_cfg.embed_dim, rng, bias=False)
        self.logit_scale = Parameter(np.array(math.log(joint_cfg.init_inv_tau)), decay=False)
        self.ssl_head = (ProjectionHead(audio_cfg.feature_dim, joint_cfg.ssl_hidden, joint_cfg.ssl_dim, rng)
                         if ssl else None)

    def project(self, feature: Tensor, modality: str) -> Tensor:
        layer = {"audio": self.audio_projection, "text": self.text_projection}[modality]
        return ops.l2_normalize(layer(feature))

    def encode_audio(self, mels) -> Tensor:
        return self.project(self.audio_encoder(mels), "audio")

    def encode_text(self, ids, eot_index) -> Tensor:
        return self.project(self.text_encoder(ids, eot_index), "text")

    def inv_tau(self) -> Tensor:
        return ops.exp(self.logit_scale)

    def clamp_logit_scale(self) -> None:
        cap = math.log(self.joint_cfg.max_inv_tau)
        if self.logit_scale.data > cap:
            self.logit_scale.data = np.asarray(cap, dtype=self.logit_scale.data.dtype)
