"""Byte-level BPE tokenisation and caption-to-caption similarity."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

_PIECE = re.compile(r" ?\S+")
SPECIALS = ("<pad>", "<start>", "<end>")


def normalize_text(text: str) -> str:
    return " ".join(text.lower().split())


def _pieces(text: str) -> list[bytes]:
    return [p.encode("utf-8") for p in _PIECE.findall(normalize_text(text))]


@dataclass
class BpeVocab:
    """Ids 0-255 are raw bytes, then one id per merge in rank order, then pad/start/end."""

    merges: list[tuple[bytes, bytes]]
    _cache: dict[bytes, list[int]] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.tokens: list[bytes] = [bytes([i]) for i in range(256)] + [a + b for a, b in self.merges]
        self.token_to_id = {tok: i for i, tok in enumerate(self.tokens)}
        self.ranks = {pair: r for r, pair in enumerate(self.merges)}
        base = len(self.tokens)
        self.pad_id, self.start_id, self.end_id = base, base + 1, base + 2
        if len(self.token_to_id) != base:
            raise ValueError("merge outputs are not unique")

    def __len__(self) -> int:
        return len(self.tokens) + len(SPECIALS)

    def encode_piece(self, piece: bytes) -> list[int]:
        hit = self._cache.get(piece)
        if hit is not None:
            return hit
        parts = [bytes([b]) for b in piece]
        while len(parts) > 1:
            best = min(((self.ranks.get(pair, len(self.ranks)), i)
                        for i, pair in enumerate(zip(parts, parts[1:]))), default=None)
            if best is None or best[0] == len(self.ranks):
                break
            pair = self.merges[best[0]]
            merged, i = [], 0
            while i < len(parts):
                if i + 1 < len(parts) and (parts[i], parts[i + 1]) == pair:
                    merged.append(pair[0] + pair[1])
                    i += 2
                else:
                    merged.append(parts[i])
                    i += 1
            parts = merged
        ids = [self.token_to_id[p] for p in parts]
        self._cache[piece] = ids
        return ids

    def to_json(self) -> dict:
        return {
            "merges": [[a.hex(), b.hex()] for a, b in self.merges],
            "special_ids": {"pad": self.pad_id, "start": self.start_id, "end": self.end_id},
        }

    @classmethod
    def from_json(cls, obj: dict) -> BpeVocab:
        vocab = cls([(bytes.fromhex(a), bytes.fromhex(b)) for a, b in obj["merges"]])
        want = obj.get("special_ids")
        if want and want != {"pad": vocab.pad_id, "start": vocab.start_id, "end": vocab.end_id}:
            raise ValueError(f"special ids in file {want} disagree with the merge table")
        return vocab

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> BpeVocab:
        return cls.from_json(json.loads(Path(path).read_text()))


def train_bpe(corpus: Sequence[str], vocab_size: int = 2000) -> BpeVocab:
    """Greedy byte-pair merging.

    ``vocab_size`` counts the 256 byte tokens plus merges; the three special
    tokens come on top. Merging stops at the budget or once no pair occurs
    at least twice. Equal counts go to the lexicographically smallest pair.
    """
    if not corpus:
        raise ValueError("cannot train BPE on an empty corpus")
    if vocab_size <= 256:
        raise ValueError(f"vocab_size must exceed the 256-byte alphabet, got {vocab_size}")
    words = Counter()
    for text in corpus:
        for piece in _pieces(text):
            words[tuple(bytes([b]) for b in piece)] += 1
    merges: list[tuple[bytes, bytes]] = []
    while len(merges) < vocab_size - 256:
        pairs = Counter()
        for word, n in words.items():
            for pair in zip(word, word[1:]):
                pairs[pair] += n
        if not pairs:
            break
        best_count = max(pairs.values())
        if best_count < 2:
            break
        best = min(p for p, c in pairs.items() if c == best_count)
        merges.append(best)
        joined = best[0] + best[1]
        updated = Counter()
        for word, n in words.items():
            out, i = [], 0
            while i < len(word):
                if i + 1 < len(word) and (word[i], word[i + 1]) == best:
                    out.append(joined)
                    i += 2
                else:
                    out.append(word[i])
                    i += 1
            updated[tuple(out)] += n
        words = updated
    return BpeVocab(merges)


@dataclass
class TokenSequence:
    ids: np.ndarray
    true_len: int
    eot_index: int

    @property
    def max_len(self) -> int:
        return len(self.ids)


def tokenize(text: str, vocab: BpeVocab, max_len: int = 77) -> TokenSequence:
    body = [i for piece in _pieces(text) for i in vocab.encode_piece(piece)]
    body = body[:max_len - 2]
    seq = [vocab.start_id, *body, vocab.end_id]
    ids = np.full(max_len, vocab.pad_id, dtype=np.int64)
    ids[:len(seq)] = seq
    return TokenSequence(ids, len(seq), len(seq) - 1)


def tokenize_batch(texts: Sequence[str], vocab: BpeVocab, max_len: int = 77) -> tuple[np.ndarray, np.ndarray]:
    """Stacked ids (n, max_len) and end-token positions (n,)."""
    seqs = [tokenize(t, vocab, max_len) for t in texts]
    return np.stack([s.ids for s in seqs]), np.array([s.eot_index for s in seqs])


def detokenize(ids: Sequence[int], vocab: BpeVocab) -> str:
    raw = b"".join(vocab.tokens[i] for i in ids if i < len(vocab.tokens))
    return raw.decode("utf-8", errors="replace")


# --- caption similarity ------------------------------------------------------

class SimilarityProvider:
    """Symmetric caption similarity in [-1, 1].

    ``matrix`` returns the full pairwise matrix for a batch; providers keyed by
    caption id use ``ids``, text-based ones use ``captions``.
    """

    kind = "base"

    def matrix(self, captions: Sequence[str], ids: Sequence[str] | None = None) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, t_i: str, t_j: str, id_i: str | None = None, id_j: str | None = None) -> float:
        ids = None if id_i is None else [id_i, id_j]
        return float(self.matrix([t_i, t_j], ids)[0, 1])


class TfidfSimilarity(SimilarityProvider):
    """Cosine between L2-normalised tf-idf vectors over word unigrams and bigrams."""

    kind = "tf-idf-cosine"

    def __init__(self):
        from sklearn.feature_extraction.text import TfidfVectorizer

        self._vectorizer = TfidfVectorizer(ngram_range=(1, 2), token_pattern=r"(?u)\b\w+\b",
                                           preprocessor=normalize_text)
        self.fitted = False

    def fit(self, captions: Sequence[str]) -> TfidfSimilarity:
        self._vectorizer.fit(list(captions))
        self.fitted = True
        return self

    def matrix(self, captions, ids=None) -> np.ndarray:
        if not self.fitted:
            raise RuntimeError("tf-idf provider must be fitted on the training captions first")
        x = self._vectorizer.transform(list(captions))
        s = np.asarray((x @ x.T).todense(), dtype=np.float64)
        s = np.clip((s + s.T) / 2.0, -1.0, 1.0)
        # identical text scores exactly 1; captions with no known terms match nothing else
        norm = np.array([normalize_text(c) for c in captions], dtype=object)
        same = norm[:, None] == norm[None, :]
        s[same] = 1.0
        empty = np.asarray(x.getnnz(axis=1) == 0)
        s[(empty[:, None] | empty[None, :]) & ~same] = 0.0
        return s


class EmbeddingFileSimilarity(SimilarityProvider):
    """Cosine between externally computed caption embeddings (JSONL ``{caption_id, vector}``)."""

    kind = "external-embedding-file"

    def __init__(self, table: dict[str, np.ndarray]):
        self.table = {}
        for key, vec in table.items():
            v = np.asarray(vec, dtype=np.float64)
            self.table[key] = v / max(np.linalg.norm(v), 1e-12)

    @classmethod
    def from_jsonl(cls, path) -> EmbeddingFileSimilarity:
        table = {}
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    row = json.loads(line)
                    table[str(row["caption_id"])] = row["vector"]
        return cls(table)

    def matrix(self, captions, ids=None) -> np.ndarray:
        if ids is None:
            raise ValueError("external embedding provider needs caption ids")
        missing = [i for i in ids if str(i) not in self.table]
        if missing:
            raise KeyError(f"no embedding for caption ids {missing[:5]}")
        e = np.stack([self.table[str(i)] for i in ids])
        s = e @ e.T
        return np.clip((s + s.T) / 2.0, -1.0, 1.0)


class ConstantSimilarity(SimilarityProvider):
    """Every pair scores ``value``; useful for checking that weighting collapses to uniform."""

    kind = "constant"

    def __init__(self, value: float = 1.0):
        self.value = float(value)

    def matrix(self, captions, ids=None) -> np.ndarray:
        return np.full((len(captions), len(captions)), self.value)
