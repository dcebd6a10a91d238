"""Manifest ingestion and image loading.

A dataset is described by a JSONL manifest: one object per line with
keys ``image_path`` (relative to the manifest's directory), ``identity``,
``camera`` and ``split`` (train/query/gallery). Identities are re-indexed
densely on load, train identities first.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .datamodel import ImageSample
from .errors import MissingFileError, ParseError, SplitError

SPLITS = ("train", "query", "gallery")


@dataclass(frozen=True)
class ManifestEntry:
    image_path: str
    identity: int
    camera: int
    split: str


@dataclass(frozen=True)
class DatasetManifest:
    """Validated dataset description with densely re-indexed identities."""

    entries: tuple[ManifestEntry, ...]
    root_dir: str
    id_map: dict  # original identity -> dense identity
    num_train_identities: int

    def split_entries(self, split: str) -> list[ManifestEntry]:
        if split not in SPLITS:
            raise ParseError(f"unknown split {split!r}")
        return [e for e in self.entries if e.split == split]


def _parse_line(line: str, lineno: int) -> ManifestEntry:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {lineno}: invalid JSON ({exc})") from exc
    if not isinstance(obj, dict):
        raise ParseError(f"line {lineno}: expected an object, got {type(obj).__name__}")
    for key in ("image_path", "identity", "camera", "split"):
        if key not in obj:
            raise ParseError(f"line {lineno}: missing key {key!r}")
    path, ident, cam, split = obj["image_path"], obj["identity"], obj["camera"], obj["split"]
    if not isinstance(path, str):
        raise ParseError(f"line {lineno}: image_path must be a string")
    if not isinstance(ident, int) or isinstance(ident, bool) or ident < 0:
        raise ParseError(f"line {lineno}: identity must be a non-negative integer")
    if not isinstance(cam, int) or isinstance(cam, bool) or cam < 0:
        raise ParseError(f"line {lineno}: camera must be a non-negative integer")
    if split not in SPLITS:
        raise ParseError(f"line {lineno}: split must be one of {SPLITS}, got {split!r}")
    return ManifestEntry(path, ident, cam, split)


def load_manifest(path: str, check_files: bool = True) -> DatasetManifest:
    """Read and validate a JSONL manifest.

    Identities are re-indexed densely: train identities take 0..k-1 in
    sorted original order; identities appearing only in eval splits
    continue from k. Raises ParseError, SplitError or MissingFileError.
    """
    if not os.path.isfile(path):
        raise MissingFileError(f"manifest not found: {path}")
    root_dir = os.path.dirname(os.path.abspath(path))
    raw: list[ManifestEntry] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            raw.append(_parse_line(line, lineno))
    if not raw:
        raise ParseError(f"manifest {path} is empty")

    train_ids = sorted({e.identity for e in raw if e.split == "train"})
    other_ids = sorted({e.identity for e in raw} - set(train_ids))
    id_map = {orig: dense for dense, orig in enumerate(train_ids + other_ids)}

    entries = tuple(
        ManifestEntry(e.image_path, id_map[e.identity], e.camera, e.split) for e in raw
    )

    gallery_ids = {e.identity for e in entries if e.split == "gallery"}
    for e in entries:
        if e.split == "query" and e.identity not in gallery_ids:
            raise SplitError(
                f"query identity {e.identity} has no gallery entry ({e.image_path})"
            )

    if check_files:
        for e in entries:
            full = os.path.join(root_dir, e.image_path)
            if not os.path.isfile(full):
                raise MissingFileError(f"image not found under {root_dir}: {e.image_path}")

    return DatasetManifest(entries, root_dir, id_map, len(train_ids))


def save_manifest(entries, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(
                json.dumps(
                    {
                        "image_path": e.image_path,
                        "identity": e.identity,
                        "camera": e.camera,
                        "split": e.split,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_image(path: str) -> np.ndarray:
    """Read a PNG/JPEG into an HxWx3 float32 array in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float32) / 255.0


def load_samples(manifest: DatasetManifest, split: str) -> list[ImageSample]:
    """Load every image of one split as ImageSample values."""
    out = []
    for e in manifest.split_entries(split):
        full = os.path.join(manifest.root_dir, e.image_path)
        if not os.path.isfile(full):
            raise MissingFileError(f"image not found: {full}")
        out.append(
            ImageSample(load_image(full), identity=e.identity, camera=e.camera,
                        source_path=e.image_path)
        )
    return out
