"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from .audio import WavFormatError
from .config import ConfigError, load_config
from .data import DataError, Dataset
from .evaluation import (
    ZeroShotTask,
    retrieval_reports,
    sample_subset,
    similarity_histograms,
    zero_shot_classify,
    zero_shot_report,
)
from .numcore import NumericOverflowError, serialize
from .numcore.serialize import FormatError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("muscall")


def _manifest_path(arg: str | None) -> Path:
    if arg:
        path = Path(arg)
    elif os.environ.get("MUSCALL_DATA_DIR"):
        path = Path(os.environ["MUSCALL_DATA_DIR"])
    else:
        raise DataError("no dataset given: pass --data or set MUSCALL_DATA_DIR")
    return path / "manifest.jsonl" if path.is_dir() else path


def _load_dataset(args) -> Dataset:
    return Dataset.load(_manifest_path(args.data))


def _load_trained(args):
    from .trainer import load_checkpoint, model_from_checkpoint

    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    path = Path(args.checkpoint)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    ckpt = load_checkpoint(path)
    model, pipeline, cfg = model_from_checkpoint(ckpt)
    return ckpt, model, pipeline, cfg


def _emit(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    print(text)


# --- commands -------------------------------------------------------------------

def cmd_generate(args) -> int:
    from .synthetic import SyntheticSpec, generate_synthetic

    if not args.out:
        raise ConfigError("--out is required")
    fractions = tuple(float(x) for x in args.fractions.split(","))
    try:
        spec = SyntheticSpec(n_pairs=args.n_pairs, seed=args.seed or 0, duration_s=args.duration,
                             split_fractions=fractions)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        manifest = generate_synthetic(spec, args.out)
    for w in caught:
        log.warning("%s", w.message)
    print(manifest)
    return EXIT_OK


def _train_config(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["max_epochs"] = args.epochs
    for flag, key in (("no_lw", "loss_weighting"), ("no_rc", "random_crop"),
                      ("no_aa", "audio_aug"), ("no_ap", "attention_pool")):
        if getattr(args, flag):
            overrides[key] = False
    if args.ssl:
        overrides["ssl"] = True
    return load_config(args.config, args.preset, overrides)


def cmd_train(args) -> int:
    from .trainer import fit

    cfg = _train_config(args)
    dataset = _load_dataset(args)
    train, valid = dataset.split("train"), dataset.split("valid")
    if args.dry_run:
        print(json.dumps({"dry_run": True, "config": cfg.to_dict(), "n_train": len(train),
                          "n_valid": len(valid)}, indent=2, sort_keys=True))
        return EXIT_OK
    out = Path(args.out or "runs/latest")
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    result = fit(dataset, cfg, out, on_epoch=lambda row: print(json.dumps(row), flush=True))
    print(json.dumps({"checkpoint": str(out / "best.ckpt"), "best_epoch": result.checkpoint.epoch,
                      "best_val_r10": result.checkpoint.best_val_r10}))
    return EXIT_OK


def _split_embeddings(args):
    from .trainer import embed_split

    ckpt, model, pipeline, cfg = _load_trained(args)
    ds = _load_dataset(args).split(args.split)
    za, zt = embed_split(model, ds, pipeline, cfg)
    return ckpt, model, pipeline, cfg, ds, za, zt


def cmd_eval(args) -> int:
    _, _, _, cfg, ds, za, zt = _split_embeddings(args)
    keep = sample_subset(len(ds), args.subset, cfg.seed if args.seed is None else args.seed)
    za, zt = za[keep], zt[keep]
    reports = retrieval_reports(za, zt, [ds.ids[i] for i in keep])
    payload = {"split": args.split, "n_pairs": int(len(keep)), "config": cfg.to_dict(),
               **{k: v.to_json() for k, v in reports.items()}}
    if args.histograms:
        samples = similarity_histograms(za, zt)
        samples.to_csv(args.histograms)
        payload["similarity"] = samples.stats
    _emit(payload, args.out)
    return EXIT_OK


def cmd_retrieve(args) -> int:
    from .trainer import encode_texts

    if not args.query:
        raise ConfigError("a text query is required")
    _, model, pipeline, cfg, ds, za, _ = _split_embeddings(args)
    q = encode_texts(model, pipeline, cfg, [args.query])[0]
    scores = za @ q
    order = np.argsort(-scores, kind="stable")[:args.k]
    hits = [{"rank": r + 1, "id": ds.ids[i], "caption": ds.captions[i], "score": float(scores[i])}
            for r, i in enumerate(order)]
    _emit({"query": args.query, "split": args.split, "k": args.k, "results": hits}, args.out)
    return EXIT_OK


def cmd_zeroshot(args) -> int:
    from .trainer import encode_texts

    _, model, pipeline, cfg, ds, za, _ = _split_embeddings(args)
    if args.attribute:
        values = [r.attributes.get(args.attribute) for r in ds.records]
        if any(v is None for v in values):
            raise DataError(f"some clips lack attribute {args.attribute!r}")
        labels = args.labels.split(",") if args.labels else sorted(set(values))
        unknown = set(values) - set(labels)
        if unknown:
            raise DataError(f"clips carry labels outside the task: {sorted(unknown)}")
        targets = np.array([labels.index(v) for v in values])
        multilabel = False
    else:
        labels = args.labels.split(",") if args.labels else sorted({t for r in ds.records for t in r.tags})
        targets = np.array([[lab in r.tags for lab in labels] for r in ds.records])
        multilabel = True
    try:
        task = ZeroShotTask(labels, args.prompt_template, multilabel)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    result = zero_shot_classify(za, task, lambda texts: encode_texts(model, pipeline, cfg, texts))
    payload = {"split": args.split, "labels": labels, "prompt_template": args.prompt_template,
               "attribute": args.attribute, **zero_shot_report(result, targets, multilabel)}
    _emit(payload, args.out)
    return EXIT_OK


def cmd_embed(args) -> int:
    _, _, _, _, ds, za, zt = _split_embeddings(args)
    out = Path(args.out or "embeddings")
    out.mkdir(parents=True, exist_ok=True)
    serialize.save_array(out / "audio.emb", za)
    serialize.save_array(out / "text.emb", zt)
    (out / "ids.txt").write_text("".join(i + "\n" for i in ds.ids))
    print(json.dumps({"out": str(out), "n": len(ds), "dim": int(za.shape[1])}))
    return EXIT_OK


# --- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="muscall", description="Contrastive audio-caption learning for music.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=True):
        p.add_argument("--data", help="manifest.jsonl or its directory (default: $MUSCALL_DATA_DIR)")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        if checkpoint:
            p.add_argument("--checkpoint")
            p.add_argument("--split", default="test", choices=["train", "valid", "test", "all"])

    g = sub.add_parser("generate", help="write a synthetic toy corpus")
    g.add_argument("--out")
    g.add_argument("--seed", type=int)
    g.add_argument("--n-pairs", type=int, default=1000)
    g.add_argument("--duration", type=float, default=5.0)
    g.add_argument("--fractions", default="0.8,0.1,0.1", help="train,valid,test split fractions")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model and keep the best validation checkpoint")
    common(t, checkpoint=False)
    t.add_argument("--config")
    t.add_argument("--preset", default="desk")
    t.add_argument("--epochs", type=int)
    for flag, what in (("--no-lw", "loss weighting"), ("--no-rc", "random cropping"),
                       ("--no-aa", "audio augmentation"), ("--no-ap", "attention pooling")):
        t.add_argument(flag, action="store_true", help=f"disable {what}")
    t.add_argument("--ssl", action="store_true", help="add the self-supervised audio branch")
    t.add_argument("--dry-run", action="store_true", help="validate config and data, then exit")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="retrieval metrics in both directions")
    common(e)
    e.add_argument("--subset", type=int, help="evaluate on a seeded random subset of this many pairs")
    e.add_argument("--histograms", help="CSV path for positive/negative similarity samples")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("retrieve", help="top-K audio for a free-text query")
    common(r)
    r.add_argument("query")
    r.add_argument("--k", type=int, default=10)
    r.set_defaults(func=cmd_retrieve)

    z = sub.add_parser("zeroshot", help="classify clips by encoding label text")
    common(z)
    z.add_argument("--attribute", help="single-label task over this manifest attribute")
    z.add_argument("--labels", help="comma-separated labels (default: all values present)")
    z.add_argument("--prompt-template", help='e.g. "A {label} track"')
    z.set_defaults(func=cmd_zeroshot)

    m = sub.add_parser("embed", help="dump joint-space embeddings and ids")
    common(m)
    m.set_defaults(func=cmd_embed)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError, WavFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericOverflowError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
