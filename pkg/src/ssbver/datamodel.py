"""Core value types shared by every other module.

All values are immutable after construction and safe to share across
threads. Pixels are stored as reals in [0, 1] so augmentation and
gradient code never re-scales; loaders convert on ingest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BatchLayoutError, DataError, IdentityCountError

MIN_IMAGE_SIDE = 32


@dataclass(frozen=True)
class ImageSample:
    """One labeled image: pixels in [0,1], identity and camera indices."""

    pixels: np.ndarray  # H x W x 3, float, values in [0, 1]
    identity: int
    camera: int
    source_path: str | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise DataError(f"pixels must be HxWx3, got shape {px.shape}")
        h, w = px.shape[:2]
        if h < MIN_IMAGE_SIDE or w < MIN_IMAGE_SIDE:
            raise DataError(f"image {h}x{w} below minimum side {MIN_IMAGE_SIDE}")
        if not np.issubdtype(px.dtype, np.floating):
            raise DataError(f"pixels must be a float array, got {px.dtype}")
        lo, hi = float(px.min()), float(px.max())
        if lo < 0.0 or hi > 1.0:
            raise DataError(f"pixel values outside [0,1]: min={lo}, max={hi}")
        if self.identity < 0:
            raise DataError(f"identity must be non-negative, got {self.identity}")
        if self.camera < 0:
            raise DataError(f"camera must be non-negative, got {self.camera}")
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class Batch:
    """P*K training batch: P distinct identities, K instances each.

    K >= 2 is enforced at construction so every anchor has at least one
    positive; validation failures raise immediately rather than at loss
    time.
    """

    samples: tuple[ImageSample, ...]
    pk_layout: tuple[int, int]  # (P, K)

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        object.__setattr__(self, "pk_layout", tuple(self.pk_layout))
        validate_batch(self)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.identity for s in self.samples], dtype=np.int64)


def validate_batch(batch: Batch) -> None:
    """Check every Batch invariant; raise on the first violation."""
    p, k = batch.pk_layout
    if p < 1 or k < 2:
        raise BatchLayoutError(f"pk_layout ({p},{k}) invalid: need P>=1 and K>=2")
    if len(batch.samples) != p * k:
        raise BatchLayoutError(
            f"batch has {len(batch.samples)} samples, layout requires {p * k}"
        )
    counts: dict[int, int] = {}
    for s in batch.samples:
        counts[s.identity] = counts.get(s.identity, 0) + 1
    if len(counts) != p:
        raise IdentityCountError(
            f"batch has {len(counts)} distinct identities, layout requires {p}"
        )
    for ident, n in counts.items():
        if n != k:
            raise IdentityCountError(f"identity {ident} has {n} instances, expected {k}")


def positive_indices(labels, anchor: int) -> list[int]:
    """Indices sharing the anchor's label, excluding the anchor itself."""
    return [j for j, l in enumerate(labels) if j != anchor and l == labels[anchor]]


def negative_indices(labels, anchor: int) -> list[int]:
    """Indices whose label differs from the anchor's."""
    return [j for j, l in enumerate(labels) if l != labels[anchor]]


@dataclass(frozen=True)
class EmbeddingMatrix:
    """N x dim matrix of embeddings, optionally row-normalized."""

    rows: np.ndarray
    dim: int
    normalized: bool = False

    def __post_init__(self):
        rows = np.asarray(self.rows)
        if rows.ndim != 2 or rows.shape[1] != self.dim:
            raise DataError(f"rows must be Nx{self.dim}, got shape {rows.shape}")
        if self.normalized:
            norms = np.linalg.norm(rows, axis=1)
            worst = float(np.max(np.abs(norms - 1.0))) if len(norms) else 0.0
            if worst > 1e-6:
                raise DataError(f"normalized flag set but max |norm-1| = {worst}")
        rows.flags.writeable = False
        object.__setattr__(self, "rows", rows)

    def __len__(self) -> int:
        return self.rows.shape[0]
