"""Paired (audio, caption) manifests and their train/valid/test assignment."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import decode_wav

SPLITS = ("train", "valid", "test")


class DataError(Exception):
    pass


@dataclass
class PairRecord:
    id: str
    audio_path: Path
    caption: str
    tags: list = field(default_factory=list)
    attributes: dict = field(default_factory=dict)


class Dataset:
    """Manifest rows plus a split map. Decoded audio is cached per instance."""

    def __init__(self, records: list[PairRecord], splits: dict[str, str] | None = None, name: str = "all"):
        ids = [r.id for r in records]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})[:5]
            raise DataError(f"duplicate ids in manifest: {dup}")
        self.records = records
        self.splits = dict(splits or {})
        self.name = name
        self._audio: dict[str, tuple[np.ndarray, int]] = {}

    @classmethod
    def load(cls, manifest, splits=None, root=None) -> Dataset:
        """Read ``manifest.jsonl`` and (if present) a sibling ``splits.json``.

        Relative audio paths resolve against ``root``, then ``$MUSCALL_DATA_DIR``,
        then the manifest's directory.
        """
        manifest = Path(manifest)
        if not manifest.exists():
            raise DataError(f"manifest not found: {manifest}")
        base = Path(root or os.environ.get("MUSCALL_DATA_DIR") or manifest.parent)
        records = []
        for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                path = Path(row["audio_path"])
                records.append(PairRecord(str(row["id"]), path if path.is_absolute() else base / path,
                                          str(row["caption"]), list(row.get("tags", [])),
                                          dict(row.get("attributes", {}))))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{manifest}:{lineno}: bad manifest row ({exc})") from exc
        missing = [str(r.audio_path) for r in records if not r.audio_path.exists()]
        if missing:
            raise DataError(f"{len(missing)} audio files not found, e.g. {missing[:3]}")
        split_path = Path(splits) if splits else manifest.parent / "splits.json"
        split_map = json.loads(split_path.read_text()) if split_path.exists() else {}
        bad = {v for v in split_map.values()} - set(SPLITS)
        if bad:
            raise DataError(f"unknown split names {sorted(bad)}")
        return cls(records, split_map)

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> Dataset:
        if name not in SPLITS and name != "all":
            raise DataError(f"unknown split {name!r}")
        if name == "all":
            return self
        chosen = [r for r in self.records if self.splits.get(r.id) == name]
        if not chosen:
            raise DataError(f"split {name!r} is empty")
        sub = Dataset(chosen, {r.id: name for r in chosen}, name)
        sub._audio = self._audio
        return sub

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    @property
    def captions(self) -> list[str]:
        return [r.caption for r in self.records]

    def audio(self, i: int) -> tuple[np.ndarray, int]:
        rec = self.records[i]
        hit = self._audio.get(rec.id)
        if hit is None:
            clip = decode_wav(rec.audio_path)
            hit = (clip.samples.astype(np.float32), clip.sample_rate)
            self._audio[rec.id] = hit
        return hit
