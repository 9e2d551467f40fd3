"""Seeded toy corpus: attribute-driven tones with template captions."""

from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import write_wav

# 4 x 7 x 6 x 6 = 1008 combinations, enough for a 1000-pair corpus without repeats
PITCH_BANDS = {"bass": (55.0, 82.5), "low": (110.0, 165.0), "middle": (220.0, 330.0), "high": (440.0, 660.0)}
NOTES_PER_SECOND = {"sluggish": 0.5, "slow": 0.75, "relaxed": 1.0, "steady": 1.5, "lively": 2.0,
                    "brisk": 3.0, "up tempo": 4.0}
HARMONIC_ROLLOFF = {"dark": 3.0, "mellow": 2.2, "warm": 1.6, "smooth": 1.1, "clear": 0.7, "bright": 0.3}
LEVEL_DB = {"hushed": -30.0, "quiet": -24.0, "soft": -18.0, "moderate": -12.0, "strong": -6.0, "loud": 0.0}

# every template names all four attributes, in different orders and contexts
DEFAULT_TEMPLATES = [
    "a {tempo} {timbre} track with {pitch} pitch and {dynamics} dynamics",
    "{dynamics} {timbre} music in a {pitch} register at a {tempo} pace",
    "{timbre} sounds with {pitch} pitch, {tempo} and {dynamics}",
    "{pitch} pitched {tempo} piece with a {timbre} tone at a {dynamics} level",
    "this {dynamics} piece is {tempo} with a {timbre} {pitch} melody",
    "{tempo} rhythm, {dynamics} volume, {timbre} timbre, {pitch} notes",
]


@dataclass
class SyntheticSpec:
    n_pairs: int = 1000
    attributes: dict[str, list[str]] = field(default_factory=lambda: {
        "pitch": list(PITCH_BANDS), "tempo": list(NOTES_PER_SECOND),
        "timbre": list(HARMONIC_ROLLOFF), "dynamics": list(LEVEL_DB)})
    templates: list[str] = field(default_factory=lambda: list(DEFAULT_TEMPLATES))
    duration_s: float = 5.0
    sample_rate: int = 16000
    noise_level: float = 0.02
    n_harmonics: int = 10
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if self.n_pairs < 1:
            raise ValueError("n_pairs must be positive")
        tables = {"pitch": PITCH_BANDS, "tempo": NOTES_PER_SECOND, "timbre": HARMONIC_ROLLOFF, "dynamics": LEVEL_DB}
        if set(self.attributes) != set(tables):
            raise ValueError(f"attributes must be exactly {sorted(tables)}")
        for name, values in self.attributes.items():
            if not values:
                raise ValueError(f"attribute {name!r} has no values")
            unknown = set(values) - set(tables[name])
            if unknown:
                raise ValueError(f"unknown {name} values {sorted(unknown)}; choose from {list(tables[name])}")
        if not self.templates:
            raise ValueError("at least one caption template is required")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be three numbers summing to 1, got {self.split_fractions}")

    def combinations(self) -> list[dict[str, str]]:
        names = ["pitch", "tempo", "timbre", "dynamics"]
        return [dict(zip(names, combo)) for combo in itertools.product(*(self.attributes[n] for n in names))]


def render(attrs: dict[str, str], spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """Repeated decaying notes: pitch band sets each fundamental, tempo the note rate,
    timbre the harmonic rolloff, dynamics the overall level."""
    sr, n = spec.sample_rate, int(round(spec.duration_s * spec.sample_rate))
    t = np.arange(n) / sr
    lo, hi = PITCH_BANDS[attrs["pitch"]]
    rate = NOTES_PER_SECOND[attrs["tempo"]]
    k = np.arange(1, spec.n_harmonics + 1)
    weights = k ** -HARMONIC_ROLLOFF[attrs["timbre"]]
    weights /= weights.sum()
    period = 1.0 / rate
    onsets = np.arange(rng.uniform(0.0, period), spec.duration_s, period)
    out = np.zeros(n)
    for start in onsets:
        f0 = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
        i0 = int(start * sr)
        decay = 0.35 * period
        seg = t[i0:i0 + int(5 * decay * sr)] - start  # envelope is below e^-5 past this
        env = np.exp(-seg / decay) * np.minimum(1.0, seg / 0.005)
        valid = k * f0 < sr / 2
        phases = rng.uniform(0, 2 * np.pi, len(k))
        tone = (weights[valid, None] * np.sin(2 * np.pi * f0 * k[valid, None] * seg + phases[valid, None])).sum(0)
        out[i0:i0 + len(seg)] += env * tone
    out /= max(np.abs(out).max(), 1e-9)
    out *= 0.5 * 10.0 ** (LEVEL_DB[attrs["dynamics"]] / 20.0)
    out += spec.noise_level * 0.05 * rng.standard_normal(n)
    return out


def caption_for(attrs: dict[str, str], template: str) -> str:
    return template.format(**attrs)


def generate_synthetic(spec: SyntheticSpec, out_dir) -> Path:
    """Write ``audio/*.wav``, ``manifest.jsonl`` and ``splits.json``; returns the manifest path."""
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    combos = spec.combinations()
    if spec.n_pairs > len(combos):
        warnings.warn(f"{spec.n_pairs} pairs over {len(combos)} attribute combinations: captions repeat, "
                      "so retrieval cannot always single out the paired clip", stacklevel=2)
    order = np.random.default_rng(spec.seed).permutation(len(combos))
    # seeded combination -> template map; c % len(templates) would tie templates to one attribute
    template_of = np.random.default_rng([spec.seed, 3]).integers(len(spec.templates), size=len(combos))
    rows = []
    for i in range(spec.n_pairs):
        c = int(order[i % len(combos)])
        attrs = combos[c]
        template = spec.templates[int(template_of[c])]
        pair_id = f"syn{i:05d}"
        audio = render(attrs, spec, np.random.default_rng([spec.seed, i]))
        rel = f"audio/{pair_id}.wav"
        write_wav(out / rel, audio, spec.sample_rate, bits=16)
        rows.append({"id": pair_id, "audio_path": rel, "caption": caption_for(attrs, template),
                     "tags": [attrs[a] for a in ("pitch", "tempo", "timbre", "dynamics")],
                     "attributes": attrs})
    manifest = out / "manifest.jsonl"
    manifest.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    (out / "splits.json").write_text(json.dumps(assign_splits([r["id"] for r in rows], spec.split_fractions,
                                                              spec.seed), indent=1, sort_keys=True))
    return manifest


def assign_splits(ids: list[str], fractions=(0.8, 0.1, 0.1), seed: int = 0) -> dict[str, str]:
    n = len(ids)
    perm = np.random.default_rng([seed, 7919]).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    names = np.array(["test"] * n, dtype=object)
    names[perm[:n_train]] = "train"
    names[perm[n_train:n_train + n_valid]] = "valid"
    return {ids[i]: str(names[i]) for i in range(n)}
