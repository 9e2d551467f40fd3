"""Retrieval ranking and metrics, zero-shot classification, similarity distributions."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class ScoreMatrix:
    scores: np.ndarray  # (Q, C)
    query_ids: list
    candidate_ids: list
    ground_truth: np.ndarray  # (Q,) candidate index per query


def ranks_from_scores(scores: np.ndarray, ground_truth: Sequence[int]) -> np.ndarray:
    """1-based rank of each ground truth; tied candidates are all placed ahead of it."""
    scores = np.asarray(scores)
    gt = np.asarray(ground_truth, dtype=np.int64)
    if gt.shape != (scores.shape[0],):
        raise ValueError(f"need one ground-truth index per query, got {gt.shape} for {scores.shape[0]} queries")
    if gt.size and (gt.min() < 0 or gt.max() >= scores.shape[1]):
        raise IndexError(f"ground-truth index outside 0..{scores.shape[1] - 1}")
    target = scores[np.arange(len(gt)), gt]
    return (scores >= target[:, None]).sum(axis=1)


def rank(queries: np.ndarray, candidates: np.ndarray, ground_truth: Sequence[int] | None = None,
         query_ids: Sequence | None = None, candidate_ids: Sequence | None = None) -> tuple[ScoreMatrix, np.ndarray]:
    q = np.asarray(queries, dtype=np.float64)
    c = np.asarray(candidates, dtype=np.float64)
    if q.ndim != 2 or c.ndim != 2 or q.shape[1] != c.shape[1]:
        raise ValueError(f"query {q.shape} and candidate {c.shape} embeddings have mismatched dimensions")
    gt = np.arange(len(q)) if ground_truth is None else np.asarray(ground_truth, dtype=np.int64)
    scores = q @ c.T
    sm = ScoreMatrix(scores, list(query_ids if query_ids is not None else range(len(q))),
                     list(candidate_ids if candidate_ids is not None else range(len(c))), gt)
    return sm, ranks_from_scores(scores, gt)


def _nonempty(ranks) -> np.ndarray:
    r = np.asarray(ranks)
    if r.size == 0:
        raise ValueError("no ranks to summarise")
    return r


def recall_at_k(ranks, k: int) -> float:
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    r = _nonempty(ranks)
    return 100.0 * float(np.count_nonzero(r <= k)) / r.size


def map_at_10(ranks) -> float:
    """Single-relevant-item AP truncated at 10, averaged over queries."""
    r = _nonempty(ranks).astype(np.float64)
    return float(np.mean(np.where(r <= 10, 1.0 / r, 0.0)))


def median_rank(ranks) -> float:
    """Even counts average the two middle ranks."""
    return float(np.median(_nonempty(ranks)))


@dataclass
class EvalReport:
    direction: str
    n_queries: int
    r_at: dict[int, float]
    map10: float
    medr: float

    @classmethod
    def from_ranks(cls, ranks, direction: str, ks: Sequence[int] = (1, 5, 10)) -> EvalReport:
        return cls(direction, int(np.size(ranks)), {k: recall_at_k(ranks, k) for k in ks},
                   map_at_10(ranks), median_rank(ranks))

    def to_json(self) -> dict:
        out = asdict(self)
        out["r_at"] = {str(k): v for k, v in self.r_at.items()}
        return out


def retrieval_reports(z_audio: np.ndarray, z_text: np.ndarray, ids: Sequence | None = None) -> dict[str, EvalReport]:
    """Both directions for aligned pairs (row i of each side belongs together)."""
    _, t2a = rank(z_text, z_audio, query_ids=ids, candidate_ids=ids)
    _, a2t = rank(z_audio, z_text, query_ids=ids, candidate_ids=ids)
    return {"text_to_audio": EvalReport.from_ranks(t2a, "text_to_audio"),
            "audio_to_text": EvalReport.from_ranks(a2t, "audio_to_text")}


def selection_key(z_audio: np.ndarray, z_text: np.ndarray) -> tuple[float, float]:
    """(mean R@10, mean mAP@10) over both directions; the second entry breaks ties once R@10 saturates."""
    reps = retrieval_reports(z_audio, z_text)
    t2a, a2t = reps["text_to_audio"], reps["audio_to_text"]
    return 0.5 * (t2a.r_at[10] + a2t.r_at[10]), 0.5 * (t2a.map10 + a2t.map10)


# --- classification metrics ---------------------------------------------------

def _binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise ValueError("metric undefined: labels need both positives and negatives")
    return s, y


def _average_ranks(s: np.ndarray) -> np.ndarray:
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    _, first, counts = np.unique(sorted_s, return_index=True, return_counts=True)
    avg = first + (counts + 1) / 2.0  # 1-based mean position of each tie group
    ranks = np.empty_like(s)
    ranks[order] = np.repeat(avg, counts)
    return ranks


def roc_auc(scores, labels) -> float:
    """P(score of a positive > score of a negative), ties counting one half."""
    s, y = _binary(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    r = _average_ranks(s)
    return float((r[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def pr_auc(scores, labels) -> float:
    """Average precision: mean over positives of precision among items scoring at least as high."""
    s, y = _binary(scores, labels)
    pos = s[y]
    at_least = (s[None, :] >= pos[:, None])
    hits = (at_least & y[None, :]).sum(axis=1)
    return float(np.mean(hits / at_least.sum(axis=1)))


def accuracy(scores, labels) -> float:
    s = np.asarray(scores)
    y = np.asarray(labels)
    if s.ndim != 2 or y.shape != (s.shape[0],):
        raise ValueError(f"scores {s.shape} and labels {y.shape} do not describe single-label predictions")
    return float(np.mean(np.argmax(s, axis=1) == y))


def macro_average(metric: Callable, scores: np.ndarray, labels: np.ndarray,
                  class_names: Sequence[str] | None = None) -> tuple[float, list]:
    """Mean of ``metric`` over columns; columns lacking positives or negatives are skipped and returned."""
    scores, labels = np.asarray(scores), np.asarray(labels)
    names = list(class_names) if class_names is not None else list(range(scores.shape[1]))
    values, skipped = [], []
    for j, name in enumerate(names):
        col = labels[:, j].astype(bool)
        if col.all() or not col.any():
            skipped.append(name)
            continue
        values.append(metric(scores[:, j], col))
    if skipped:
        log.warning("excluded %d degenerate classes from macro average: %s", len(skipped), skipped)
    if not values:
        raise ValueError("every class is degenerate; macro average undefined")
    return float(np.mean(values)), skipped


# --- zero-shot ------------------------------------------------------------------

@dataclass
class ZeroShotTask:
    labels: list[str]
    prompt_template: str | None = None
    multilabel: bool = False

    def __post_init__(self):
        if not self.labels:
            raise ValueError("zero-shot task needs at least one label")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("zero-shot labels must be distinct")
        if self.prompt_template is not None and "{label}" not in self.prompt_template:
            raise ValueError(f"prompt template {self.prompt_template!r} lacks the {{label}} placeholder")

    def texts(self) -> list[str]:
        if self.prompt_template is None:
            return list(self.labels)
        return [self.prompt_template.replace("{label}", lab) for lab in self.labels]


@dataclass
class ZeroShotResult:
    scores: np.ndarray  # (n_audio, n_labels) cosine similarities
    labels: list[str]

    @property
    def predictions(self) -> np.ndarray:
        return np.argmax(self.scores, axis=1)

    def predicted_labels(self) -> list[str]:
        return [self.labels[i] for i in self.predictions]


def zero_shot_classify(audio_embeddings: np.ndarray, task: ZeroShotTask,
                       encode_text: Callable[[list[str]], np.ndarray]) -> ZeroShotResult:
    """``encode_text`` maps strings to L2-normalised joint-space rows."""
    z_text = np.asarray(encode_text(task.texts()), dtype=np.float64)
    z_audio = np.asarray(audio_embeddings, dtype=np.float64)
    z_audio = z_audio / np.maximum(np.linalg.norm(z_audio, axis=1, keepdims=True), 1e-12)
    return ZeroShotResult(z_audio @ z_text.T, list(task.labels))


def zero_shot_report(result: ZeroShotResult, targets, multilabel: bool = False) -> dict:
    """Single-label: accuracy plus one-vs-rest macro ROC/PR. Multilabel: macro ROC/PR over tags."""
    if multilabel:
        onehot = np.asarray(targets).astype(bool)
    else:
        y = np.asarray(targets)
        onehot = np.zeros_like(result.scores, dtype=bool)
        onehot[np.arange(len(y)), y] = True
    roc, skipped = macro_average(roc_auc, result.scores, onehot, result.labels)
    pr, _ = macro_average(pr_auc, result.scores, onehot, result.labels)
    out = {"roc_auc": roc, "pr_auc": pr, "n_clips": int(len(result.scores)), "excluded_classes": skipped}
    if not multilabel:
        out["accuracy"] = accuracy(result.scores, np.asarray(targets))
    return out


# --- similarity distributions -------------------------------------------------

@dataclass
class SimilaritySamples:
    positives: np.ndarray
    negatives: np.ndarray
    stats: dict = field(default_factory=dict)

    def gap_in_standard_errors(self) -> float:
        """(mean_pos - mean_neg) / combined standard error."""
        p, n = self.positives, self.negatives
        if p.size < 2 or n.size < 2:
            raise ValueError("need at least two positives and two negatives")
        se = np.sqrt(p.var(ddof=1) / p.size + n.var(ddof=1) / n.size)
        return float((p.mean() - n.mean()) / se)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["score", "is_positive"])
            w.writerows([repr(float(s)), 1] for s in self.positives)
            w.writerows([repr(float(s)), 0] for s in self.negatives)


def similarity_histograms(z_audio: np.ndarray, z_text: np.ndarray) -> SimilaritySamples:
    s = np.asarray(z_audio, dtype=np.float64) @ np.asarray(z_text, dtype=np.float64).T
    diag = np.eye(len(s), dtype=bool)
    pos, neg = s[diag], s[~diag]
    stats = {"n_positive": int(pos.size), "n_negative": int(neg.size),
             "mean_positive": float(pos.mean()), "var_positive": float(pos.var()),
             "mean_negative": float(neg.mean()) if neg.size else None,
             "var_negative": float(neg.var()) if neg.size else None}
    return SimilaritySamples(pos, neg, stats)


def sample_subset(n_items: int, size: int | None, seed: int = 0) -> np.ndarray:
    """Seeded evaluation subset (sorted indices); ``None`` or an oversized request keeps everything."""
    if size is None or size >= n_items:
        return np.arange(n_items)
    if size < 1:
        raise ValueError("subset size must be positive")
    return np.sort(np.random.default_rng(seed).choice(n_items, size=size, replace=False))


def write_report(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))
