"""Command-line surface for batch use.

Exit codes are fixed so shell harnesses can branch: 0 ok, 2 config
error, 3 io error, 4 data/protocol error, 5 numeric error. Every
command echoes its effective configuration into the output directory,
and the SSBVER_SEED environment variable overrides the configured seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import evaluation
from .backbone import TinyEncoder
from .config import apply_overrides, config_from_dict, config_to_dict, dump_json
from .dataio import load_image, load_manifest
from .errors import (
    BatchLayoutError,
    ConfigError,
    DataError,
    DegenerateBatchError,
    DegenerateError,
    EmptyPairError,
    IdentityCountError,
    IoError,
    MiningError,
    MissingFileError,
    NoMatchError,
    NonFiniteLossError,
    ParseError,
    RangeError,
    ShapeMismatchError,
    SplitError,
)
from .profiler import profile_encoder
from .synthetic import SyntheticSpec, generate_synthetic
from .trainer import TrainConfig, load_checkpoint, run_training, write_named_arrays

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5

_DATA_ERRORS = (
    ParseError,
    SplitError,
    MissingFileError,
    DataError,
    NoMatchError,
    MiningError,
    BatchLayoutError,
    IdentityCountError,
    DegenerateError,
    DegenerateBatchError,
    RangeError,
    ShapeMismatchError,
    EmptyPairError,
)

ENV_SEED = "SSBVER_SEED"


def _read_json(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top-level value must be an object")
    return data


def _env_seed() -> int | None:
    raw = os.environ.get(ENV_SEED)
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"{ENV_SEED} must be an integer, got {raw!r}") from exc


def _ensure_out(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_make_synthetic(args) -> int:
    data = _read_json(args.spec) if args.spec else {}
    apply_overrides(data, args.set or [])
    env_seed = _env_seed()
    if env_seed is not None:
        data["seed"] = env_seed
    spec = config_from_dict(SyntheticSpec, data)
    out = _ensure_out(args.out)
    generate_synthetic(spec, str(out))
    dump_json(config_to_dict(spec), out / "config.json")
    print(f"wrote {spec.n_identities * spec.images_per_identity} images under {out}")
    return EXIT_OK


def _load_train_config(args) -> TrainConfig:
    data = _read_json(args.config) if args.config else {}
    apply_overrides(data, args.set or [])
    env_seed = _env_seed()
    if env_seed is not None:
        data["seed"] = env_seed
    cfg = config_from_dict(TrainConfig, data)
    if getattr(args, "baseline", False):
        cfg = cfg.baseline()
    cfg.validate()
    return cfg


def _cmd_train(args) -> int:
    cfg = _load_train_config(args)
    manifest = load_manifest(args.data)
    out = _ensure_out(args.out)
    dump_json(config_to_dict(cfg), out / "config.json")
    trainer, log = run_training(cfg, manifest, out_dir=out)
    print(
        f"trained {trainer.epochs_done} epochs ({trainer.iteration} steps); "
        f"checkpoint and trainlog under {out}"
    )
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    loaded = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.data)
    out = _ensure_out(args.out)
    protocol = args.protocol
    encoder = loaded.teacher.encoder
    neck = loaded.head.neck
    q_emb, q_labels, q_cams = evaluation.embeddings_for_entries(encoder, neck, manifest, "query")
    g_emb, g_labels, g_cams = evaluation.embeddings_for_entries(encoder, neck, manifest, "gallery")
    metrics = evaluation.evaluate_retrieval(
        q_emb.rows, q_labels, q_cams, g_emb.rows, g_labels, g_cams, protocol=protocol
    )
    dump_json(metrics, out / "metrics.json")
    all_rows = np.concatenate([q_emb.rows, g_emb.rows], axis=0)
    all_labels = np.concatenate([q_labels, g_labels])
    report = evaluation.distance_report(all_rows, all_labels)
    evaluation.write_distance_report(
        report, out / "distance_report.csv", out / "distance_summary.json"
    )
    dump_json(
        {"checkpoint": str(args.checkpoint), "data": str(args.data), "protocol": protocol},
        out / "config.json",
    )
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def _cmd_saliency(args) -> int:
    loaded = load_checkpoint(args.checkpoint)
    out = _ensure_out(args.out)
    query = load_image(args.query)
    gallery = load_image(args.gallery)
    result = evaluation.saliency_pair(
        query, gallery, loaded.teacher.encoder, neck=loaded.head.neck
    )
    Image.fromarray(evaluation.saliency_overlay(query, result.query_map)).save(
        out / "query_saliency.png"
    )
    Image.fromarray(evaluation.saliency_overlay(gallery, result.gallery_map)).save(
        out / "gallery_saliency.png"
    )
    write_named_arrays(
        out / "saliency_maps.npz",
        {"query_map": result.query_map, "gallery_map": result.gallery_map},
    )
    dump_json({"similarity_score": result.score}, out / "saliency.json")
    dump_json(
        {
            "checkpoint": str(args.checkpoint),
            "query": str(args.query),
            "gallery": str(args.gallery),
        },
        out / "config.json",
    )
    print(f"similarity score {result.score:.6f}; maps under {out}")
    return EXIT_OK


def _cmd_profile(args) -> int:
    if bool(args.checkpoint) == bool(args.arch):
        raise ConfigError("pass exactly one of --checkpoint or --arch")
    if args.checkpoint:
        encoder = load_checkpoint(args.checkpoint).teacher.encoder
    else:
        if args.arch != "tiny":
            raise ConfigError(f"unknown architecture {args.arch!r}")
        encoder = TinyEncoder(embed_dim=args.embed_dim)
    out = _ensure_out(args.out)
    report = profile_encoder(
        encoder, image_size=(args.image_size, args.image_size),
        warmup=args.warmup, iters=args.iters,
    )
    report.to_json(out / "efficiency.json")
    dump_json(
        {
            "checkpoint": str(args.checkpoint) if args.checkpoint else None,
            "arch": args.arch,
            "image_size": args.image_size,
            "warmup": args.warmup,
            "iters": args.iters,
        },
        out / "config.json",
    )
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssbver",
        description="Hybrid re-identification training, evaluation and analysis",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_set(p):
        p.add_argument(
            "--set",
            action="append",
            metavar="KEY.PATH=VALUE",
            help="override a config key by dotted path (value parsed as JSON)",
        )

    p = sub.add_parser("make-synthetic", help="render a deterministic synthetic dataset")
    p.add_argument("--spec", help="JSON file with dataset spec fields")
    p.add_argument("--out", required=True)
    add_set(p)
    p.set_defaults(func=_cmd_make_synthetic)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--config", help="JSON training config (defaults apply when omitted)")
    p.add_argument("--data", required=True, help="manifest.jsonl path")
    p.add_argument("--out", required=True)
    p.add_argument(
        "--baseline",
        action="store_true",
        help="supervised-only run: matching loss off, no local views",
    )
    add_set(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="retrieval metrics and distance report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--protocol", default="cross_camera", choices=evaluation.PROTOCOLS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("saliency", help="input-gradient saliency for an image pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_saliency)

    p = sub.add_parser("profile", help="efficiency report for an encoder")
    p.add_argument("--checkpoint")
    p.add_argument("--arch", choices=("tiny",))
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--warmup", type=int, default=20)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_profile)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (IoError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
