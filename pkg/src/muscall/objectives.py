"""Contrastive objectives: InfoNCE in both directions, relevance weighting, NT-Xent."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numcore import NumericOverflowError, Tensor, ops
from .text import SimilarityProvider

_MASK = -1e9


@dataclass
class LossWeights:
    w: np.ndarray
    log_w: np.ndarray
    kappa: float
    normalized: bool


def _check_batch(z: Tensor, name: str) -> None:
    if z.ndim != 2:
        raise ValueError(f"{name} must be (N, d), got {z.shape}")
    if z.shape[0] < 2:
        raise ValueError(f"contrastive loss needs at least 2 pairs, got {z.shape[0]}")
    norms = np.linalg.norm(z.data, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-3):
        raise ValueError(f"{name} rows are not L2-normalised (norms in [{norms.min():.4f}, {norms.max():.4f}])")


def info_nce_direction(z_query: Tensor, z_key: Tensor, inv_tau, weights: np.ndarray | None = None) -> Tensor:
    """Mean over rows of ``w_i * CE(inv_tau * z_query @ z_key.T, diagonal)``."""
    _check_batch(z_query, "query embeddings")
    _check_batch(z_key, "key embeddings")
    if z_query.shape != z_key.shape:
        raise ValueError(f"query {z_query.shape} and key {z_key.shape} batches differ")
    logits = ops.mul(ops.matmul(z_query, ops.transpose(z_key)), inv_tau)
    ce = ops.cross_entropy_diagonal(logits)
    if weights is not None:
        w = np.asarray(weights, dtype=ce.dtype)
        if w.shape != (z_query.shape[0],):
            raise ValueError(f"weights shape {w.shape} does not match batch of {z_query.shape[0]}")
        ce = ops.mul(ce, Tensor(w, dtype=ce.dtype))
    return ops.mean(ce)


def bidirectional_loss(z_a: Tensor, z_t: Tensor, inv_tau, weights: np.ndarray | None = None) -> Tensor:
    """Audio-to-text plus text-to-audio InfoNCE; row ``i`` weight applies in both directions."""
    return ops.add(info_nce_direction(z_a, z_t, inv_tau, weights),
                   info_nce_direction(z_t, z_a, inv_tau, weights))


def weights_from_similarity(sim: np.ndarray, kappa: float = 0.005, normalize: bool = True,
                            exclude_self: bool = False) -> LossWeights:
    """``w_i = exp(mean_j sim_ij / kappa)``, evaluated in log space.

    With ``normalize`` the weights are rescaled to mean 1. Without it, the
    raw exponentials are returned and overflow raises.
    """
    if kappa <= 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    s = np.asarray(sim, dtype=np.float64)
    n = s.shape[0]
    if exclude_self and n > 1:
        m = (s.sum(axis=1) - np.diag(s)) / (n - 1)
    else:
        m = s.mean(axis=1)
    log_w = m / kappa
    if normalize:
        e = np.exp(log_w - log_w.max())
        w = e / e.mean()
    else:
        with np.errstate(over="ignore"):
            w = np.exp(log_w)
        if not np.all(np.isfinite(w)):
            raise NumericOverflowError(
                f"unnormalised relevance weights overflow (max log-weight {log_w.max():.1f}); use normalize=True")
    return LossWeights(w, log_w, kappa, normalize)


def relevance_weights(captions: Sequence[str], provider: SimilarityProvider, kappa: float = 0.005,
                      normalize: bool = True, exclude_self: bool = False,
                      ids: Sequence[str] | None = None, use_distance: bool = False) -> LossWeights:
    """Per-caption weights from mean in-batch caption similarity.

    ``use_distance`` swaps similarity for cosine distance (1 - cos).
    """
    sim = provider.matrix(captions, ids)
    if use_distance:
        sim = 1.0 - sim
    return weights_from_similarity(sim, kappa, normalize, exclude_self)


def nt_xent(v1: Tensor, v2: Tensor, temperature: float = 0.5) -> Tensor:
    """SimCLR loss over 2N views: each view's positive is its counterpart, self excluded."""
    if v1.shape != v2.shape:
        raise ValueError(f"view batches differ: {v1.shape} vs {v2.shape}")
    n = v1.shape[0]
    if n < 2:
        raise ValueError(f"NT-Xent needs at least 2 samples per view, got {n}")
    z = ops.concat([v1, v2], axis=0)
    logits = ops.mul(ops.matmul(z, ops.transpose(z)), 1.0 / temperature)
    logits = ops.add(logits, np.diag(np.full(2 * n, _MASK, dtype=z.dtype)))
    target = np.concatenate([np.arange(n, 2 * n), np.arange(n)])
    ce = ops.sub(ops.logsumexp(logits, axis=1), logits[np.arange(2 * n), target])
    return ops.mean(ce)


def multitask_loss(l_ssl: Tensor, l_cross: Tensor, lam: float = 0.3) -> Tensor:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return ops.add(ops.mul(l_ssl, lam), ops.mul(l_cross, 1.0 - lam))
