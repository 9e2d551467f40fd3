"""Batching, optimisation, model selection and checkpoints."""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .audio import AudioClip, MelNormalizer, augment, crop, log_mel_batch
from .config import TrainConfig
from .data import DataError, Dataset
from .encoders import MusCALL
from .evaluation import selection_key
from .numcore import NumericOverflowError, Parameter, Tensor, default_dtype, no_grad
from .numcore.serialize import FormatError
from .objectives import bidirectional_loss, multitask_loss, nt_xent, relevance_weights
from .text import BpeVocab, SimilarityProvider, TfidfSimilarity, tokenize_batch, train_bpe

log = logging.getLogger(__name__)


class TrainingDiverged(NumericOverflowError):
    pass


# --- features -----------------------------------------------------------------

@dataclass
class Pipeline:
    """Everything fitted on the training split that turns raw pairs into model inputs."""

    vocab: BpeVocab
    normalizer: MelNormalizer
    provider: SimilarityProvider | None = None

    @classmethod
    def fit(cls, train: Dataset, cfg: TrainConfig) -> Pipeline:
        vocab = train_bpe(train.captions, cfg.bpe_vocab_size)
        mels = []
        for start in range(0, len(train), 64):
            idx = range(start, min(start + 64, len(train)))
            waves = np.stack([_crop_wave(train, i, cfg, "center", None) for i in idx])
            mels.extend(log_mel_batch(waves, cfg.mel_config()))
        return cls(vocab, MelNormalizer.fit(mels), TfidfSimilarity().fit(train.captions))

    def mels(self, waves: np.ndarray, cfg: TrainConfig) -> np.ndarray:
        # per-bin statistics broadcast over the batch axis
        return self.normalizer(log_mel_batch(waves, cfg.mel_config()))

    def tokens(self, texts, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
        return tokenize_batch(texts, self.vocab, cfg.max_len)


def _crop_wave(ds: Dataset, i: int, cfg: TrainConfig, mode: str, rng) -> np.ndarray:
    samples, sr = ds.audio(i)
    if sr != cfg.sample_rate:
        raise DataError(f"{ds.records[i].id}: sample rate {sr} Hz, expected {cfg.sample_rate} Hz")
    return crop(AudioClip(samples, sr, ds.records[i].id), cfg.crop_seconds, mode, rng).samples


@dataclass
class Batch:
    mels: np.ndarray  # (B, n_mels, n_frames)
    ids: np.ndarray  # (B, max_len)
    eot: np.ndarray  # (B,)
    captions: list[str]
    caption_ids: list[str]
    views: np.ndarray | None = None  # second augmented view for the self-supervised branch


def build_batch(dataset: Dataset, indices, cfg: TrainConfig, rng: np.random.Generator,
                pipeline: Pipeline, train: bool = True, ssl_view: bool = False) -> Batch:
    """Instance-discrimination batch: row i's positive is its own caption, every other row a negative."""
    indices = [int(i) for i in indices]
    if len(set(indices)) != len(indices):
        raise ValueError("batch indices must be distinct; a repeated pair would be its own negative")
    mode = "random" if (train and cfg.random_crop) else "center"
    aug_cfg = cfg.augment_config()
    first, second = [], []
    for i in indices:
        samples, sr = dataset.audio(i)
        if sr != cfg.sample_rate:
            raise DataError(f"{dataset.records[i].id}: sample rate {sr} Hz, expected {cfg.sample_rate} Hz")
        clip = crop(AudioClip(samples, sr, dataset.records[i].id), cfg.crop_seconds, mode, rng)
        a = augment(clip, aug_cfg, rng) if (train and cfg.audio_aug) else clip
        first.append(a.samples)
        if ssl_view:
            second.append((augment(clip, aug_cfg, rng) if cfg.audio_aug else clip).samples)
    captions = [dataset.records[i].caption for i in indices]
    ids, eot = pipeline.tokens(captions, cfg)
    views = pipeline.mels(np.stack(second), cfg) if ssl_view else None
    return Batch(pipeline.mels(np.stack(first), cfg), ids, eot, captions,
                 [dataset.records[i].id for i in indices], views)


# --- model & loss ---------------------------------------------------------------

def build_model(cfg: TrainConfig, vocab_size: int, ssl: bool | None = None) -> MusCALL:
    with default_dtype(cfg.dtype):
        return MusCALL(cfg.audio_config(), cfg.text_config(vocab_size), cfg.joint_config(),
                       seed=cfg.seed, ssl=cfg.ssl if ssl is None else ssl)


def compute_loss(model: MusCALL, batch: Batch, cfg: TrainConfig, provider: SimilarityProvider | None,
                 counters: Counter | None = None) -> tuple[Tensor, dict]:
    counters = counters if counters is not None else Counter()
    feat = model.audio_encoder(batch.mels)
    z_a = model.project(feat, "audio")
    z_t = model.encode_text(batch.ids, batch.eot)
    weights = None
    if cfg.loss_weighting:
        weights = relevance_weights(batch.captions, provider, cfg.kappa, ids=batch.caption_ids,
                                    use_distance=cfg.lw_use_distance).w
    l_cross = bidirectional_loss(z_a, z_t, model.inv_tau(), weights)
    counters["bidirectional"] += 1
    parts = {"cross": l_cross.item()}
    if not cfg.ssl:
        return l_cross, parts
    if model.ssl_head is None or batch.views is None:
        raise ValueError("self-supervised loss needs a model with an SSL head and a second audio view")
    feat2 = model.audio_encoder(batch.views)
    l_ssl = nt_xent(model.ssl_head(feat), model.ssl_head(feat2), cfg.ssl_temperature)
    counters["nt_xent"] += 1
    parts["ssl"] = l_ssl.item()
    return multitask_loss(l_ssl, l_cross, cfg.lambda_ssl), parts


# --- optimiser --------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    skipped: int = 0

    @classmethod
    def init(cls, params: list[Parameter]) -> AdamState:
        return cls({p.name: np.zeros_like(p.data) for p in params}, {p.name: np.zeros_like(p.data) for p in params})


def adam_step(params: list[Parameter], grads: dict[str, np.ndarray | None], state: AdamState, lr_t: float,
              weight_decay: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> bool:
    """Adam with bias correction and decoupled decay on ``decay=True`` parameters.

    A non-finite gradient anywhere skips the whole step; returns whether it was applied.
    """
    for p in params:
        g = grads.get(p.name)
        if g is not None and not np.all(np.isfinite(g)):
            state.skipped += 1
            log.warning("non-finite gradient in %s; skipping optimiser step (%d skipped so far)",
                        p.name, state.skipped)
            return False
    b1, b2 = betas
    state.t += 1
    c1, c2 = 1.0 - b1 ** state.t, 1.0 - b2 ** state.t
    for p in params:
        g = grads.get(p.name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or state.m[p.name].shape != p.shape:
            raise ValueError(f"{p.name}: gradient {g.shape} / moments {state.m[p.name].shape} vs parameter {p.shape}")
        data = p.data
        if p.decay and weight_decay:
            data = data * (1.0 - lr_t * weight_decay)
        m = b1 * state.m[p.name] + (1.0 - b1) * g
        v = b2 * state.v[p.name] + (1.0 - b2) * (g * g)
        state.m[p.name], state.v[p.name] = m.astype(p.dtype), v.astype(p.dtype)
        p.data = (data - lr_t * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return True


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps <= 0:
        raise ValueError("cosine schedule needs total_steps >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# --- checkpoints ------------------------------------------------------------------

MAGIC = b"MUSCKPT\x00"
VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_t: int
    mel_mean: np.ndarray
    mel_std: np.ndarray
    vocab: dict
    config: dict
    epoch: int
    best_val_r10: float

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)


def make_checkpoint(model: MusCALL, state: AdamState, pipeline: Pipeline, cfg: TrainConfig,
                    epoch: int, best: float) -> Checkpoint:
    return Checkpoint({k: v.copy() for k, v in model.state_dict().items()},
                      {k: v.copy() for k, v in state.m.items()}, {k: v.copy() for k, v in state.v.items()},
                      state.t, pipeline.normalizer.mean.copy(), pipeline.normalizer.std.copy(),
                      pipeline.vocab.to_json(), cfg.to_dict(), epoch, float(best))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """``MAGIC | u32 version | u64 manifest length | JSON manifest | little-endian tensor payload``."""
    tensors = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    tensors += [(f"adam_m/{k}", v) for k, v in ckpt.adam_m.items()]
    tensors += [(f"adam_v/{k}", v) for k, v in ckpt.adam_v.items()]
    tensors += [("mel/mean", ckpt.mel_mean), ("mel/std", ckpt.mel_std)]
    entries, chunks, offset = [], [], 0
    for name, arr in tensors:
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"version": VERSION, "config": ckpt.config, "epoch": ckpt.epoch, "best_val_r10": ckpt.best_val_r10,
                "adam_t": ckpt.adam_t, "vocab": ckpt.vocab, "tensors": entries, "payload_bytes": offset}
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", VERSION, len(head)) + head)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    stream = io.BytesIO(buf)
    magic = stream.read(len(MAGIC))
    if magic != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (expected magic {MAGIC!r}, found {magic!r})")
    fixed = stream.read(12)
    if len(fixed) != 12:
        raise FormatError(f"{path}: truncated header (expected 12 bytes, found {len(fixed)})")
    version, head_len = struct.unpack("<IQ", fixed)
    if version != VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, expected {VERSION}")
    head = stream.read(head_len)
    if len(head) != head_len:
        raise FormatError(f"{path}: truncated manifest (expected {head_len} bytes, found {len(head)})")
    try:
        manifest = json.loads(head)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt manifest ({exc})") from exc
    payload = stream.read()
    if len(payload) != manifest["payload_bytes"]:
        raise FormatError(f"{path}: truncated payload (expected {manifest['payload_bytes']} bytes, "
                          f"found {len(payload)})")
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}, "mel": {}}
    for e in manifest["tensors"]:
        kind, name = e["name"].split("/", 1)
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        dt = np.dtype(e["dtype"])
        groups[kind][name] = np.frombuffer(raw, dtype=dt).reshape(e["shape"]).astype(dt.newbyteorder("="))
    return Checkpoint(groups["param"], groups["adam_m"], groups["adam_v"], manifest["adam_t"],
                      groups["mel"]["mean"], groups["mel"]["std"], manifest["vocab"], manifest["config"],
                      manifest["epoch"], manifest["best_val_r10"])


def model_from_checkpoint(ckpt: Checkpoint, eval_only: bool = True) -> tuple[MusCALL, Pipeline, TrainConfig]:
    """Rebuild model and feature pipeline. With ``eval_only`` the SSL head's weights are dropped."""
    cfg = ckpt.train_config()
    vocab = BpeVocab.from_json(ckpt.vocab)
    params = dict(ckpt.params)
    ssl = cfg.ssl and not eval_only
    if not ssl:
        params = {k: v for k, v in params.items() if not k.startswith("ssl_head.")}
    model = build_model(cfg, len(vocab), ssl=ssl)
    model.load_state_dict(params, strict=True)
    return model, Pipeline(vocab, MelNormalizer(ckpt.mel_mean, ckpt.mel_std)), cfg


# --- embedding & training loop ----------------------------------------------------

def embed_split(model: MusCALL, dataset: Dataset, pipeline: Pipeline, cfg: TrainConfig,
                batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Center-cropped, un-augmented joint-space embeddings (audio, text) for every pair."""
    za, zt = [], []
    with default_dtype(cfg.dtype), no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = list(range(start, min(start + batch_size, len(dataset))))
            waves = np.stack([_crop_wave(dataset, i, cfg, "center", None) for i in idx])
            za.append(model.encode_audio(pipeline.mels(waves, cfg)).data)
            ids, eot = pipeline.tokens([dataset.records[i].caption for i in idx], cfg)
            zt.append(model.encode_text(ids, eot).data)
    return np.concatenate(za), np.concatenate(zt)


def encode_texts(model: MusCALL, pipeline: Pipeline, cfg: TrainConfig, texts: list[str]) -> np.ndarray:
    with default_dtype(cfg.dtype), no_grad():
        ids, eot = pipeline.tokens(texts, cfg)
        return model.encode_text(ids, eot).data


def encode_audio(model: MusCALL, pipeline: Pipeline, cfg: TrainConfig, waves: np.ndarray) -> np.ndarray:
    with default_dtype(cfg.dtype), no_grad():
        return model.encode_audio(pipeline.mels(waves, cfg)).data


@dataclass
class FitResult:
    model: MusCALL
    pipeline: Pipeline
    checkpoint: Checkpoint
    log: list[dict]
    counters: Counter = field(default_factory=Counter)
    first_batch_loss: float | None = None


def _batches(order: np.ndarray, size: int) -> list[np.ndarray]:
    out = [order[i:i + size] for i in range(0, len(order), size)]
    return [b for b in out if len(b) >= 2]


def fit(dataset: Dataset, cfg: TrainConfig, out_dir=None, provider: SimilarityProvider | None = None,
        on_epoch: Callable[[dict], None] | None = None) -> FitResult:
    """Train, selecting the epoch with the best validation R@10 (mean of both directions), ties broken by mAP@10.

    ``provider`` overrides the tf-idf caption similarity used for loss weighting.
    Writes ``train_log.jsonl`` and ``best.ckpt`` when ``out_dir`` is given.
    """
    train, valid = dataset.split("train"), dataset.split("valid")
    if len(train) < 2:
        raise DataError("training split needs at least two pairs")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_log.jsonl").write_text("")
    with default_dtype(cfg.dtype):
        pipeline = Pipeline.fit(train, cfg)
        if provider is not None:
            pipeline.provider = provider
        model = build_model(cfg, len(pipeline.vocab))
        params = model.parameters()
        state = AdamState.init(params)
        shuffle_rng = np.random.default_rng([cfg.seed, 1])
        batch_rng = np.random.default_rng([cfg.seed, 2])
        per_epoch = len(_batches(np.arange(len(train)), cfg.batch_size))
        total = per_epoch * cfg.max_epochs
        counters: Counter = Counter()
        history, best, best_ckpt, step, first_loss = [], (-1.0, -1.0), None, 0, None
        for epoch in range(cfg.max_epochs):
            model.train()
            losses, bad_run = [], 0
            for idx in _batches(shuffle_rng.permutation(len(train)), cfg.batch_size):
                lr_t = cosine_lr(step, total, cfg.lr)
                step += 1
                batch = build_batch(train, idx, cfg, batch_rng, pipeline, ssl_view=cfg.ssl)
                model.zero_grad()
                try:
                    loss, _ = compute_loss(model, batch, cfg, pipeline.provider, counters)
                    loss.backward()
                except NumericOverflowError as exc:
                    bad_run += 1
                    counters["nonfinite_loss"] += 1
                    log.warning("epoch %d step %d: non-finite loss (%s)", epoch, step, exc)
                    if bad_run >= 3:
                        raise TrainingDiverged(f"aborting at epoch {epoch}, step {step}: 3 consecutive non-finite "
                                               f"losses; last error: {exc}; lr={lr_t:.3g}, "
                                               f"inv_tau={float(np.exp(model.logit_scale.data)):.3g}") from exc
                    continue
                bad_run = 0
                if first_loss is None:
                    first_loss = loss.item()
                if adam_step(params, {p.name: p.grad for p in params}, state, lr_t, cfg.weight_decay,
                             cfg.betas, cfg.adam_eps):
                    counters["steps"] += 1
                else:
                    counters["skipped_steps"] += 1
                model.clamp_logit_scale()
                losses.append(loss.item())
            model.eval()
            za, zt = embed_split(model, valid, pipeline, cfg)
            key = selection_key(za, zt)
            val_r10 = key[0]
            row = {"epoch": epoch, "train_loss": float(np.mean(losses)) if losses else float("nan"),
                   "val_r10": val_r10, "val_map10": key[1], "lr": cosine_lr(step, total, cfg.lr)}
            history.append(row)
            if out is not None:
                with open(out / "train_log.jsonl", "a") as fh:
                    fh.write(json.dumps(row) + "\n")
            if on_epoch is not None:
                on_epoch(row)
            if key > best:
                best = key
                best_ckpt = make_checkpoint(model, state, pipeline, cfg, epoch, val_r10)
                if out is not None:
                    save_checkpoint(best_ckpt, out / "best.ckpt")
        model.load_state_dict(best_ckpt.params)
    return FitResult(model, pipeline, best_ckpt, history, counters, first_loss)
