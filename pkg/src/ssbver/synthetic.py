"""Deterministic synthetic "toy vehicle" dataset generator.

Each identity gets a fixed attribute tuple (body shape + color, aspect,
two-color marker pattern); each image renders that identity under a
per-image random rotation, scale, background color and pixel noise, so
retrieval is nontrivial but learnable in minutes. Identical specs
produce bit-identical trees: the per-image RNG stream is derived from
(seed, identity, image_index).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .dataio import DatasetManifest, ManifestEntry, load_manifest, save_manifest
from .errors import ConfigError, IoError

BODY_COLORS = (
    (0.85, 0.10, 0.10),
    (0.10, 0.45, 0.85),
    (0.10, 0.70, 0.20),
    (0.90, 0.75, 0.10),
    (0.60, 0.15, 0.75),
    (0.95, 0.45, 0.05),
    (0.05, 0.70, 0.70),
    (0.90, 0.30, 0.60),
    (0.35, 0.25, 0.10),
    (0.25, 0.25, 0.30),
)
MARKER_COLORS = (
    (0.95, 0.95, 0.95),
    (0.05, 0.05, 0.05),
    (0.90, 0.10, 0.10),
    (0.10, 0.20, 0.90),
    (0.10, 0.80, 0.10),
    (0.95, 0.90, 0.10),
    (0.10, 0.90, 0.90),
    (0.90, 0.10, 0.90),
)
SHAPES = ("box", "ellipse", "wedge")
ASPECTS = (0.45, 0.6, 0.75)
LAYOUTS = ("horizontal", "vertical")

ROTATION_DEGREES = 30.0
SCALE_RANGE = (0.7, 1.0)
NOISE_SIGMA = 0.02

_ATTR_STREAM = 0
_IMAGE_STREAM = 1


@dataclass(frozen=True)
class SyntheticSpec:
    n_identities: int
    images_per_identity: int
    image_size: tuple[int, int] = (128, 128)
    n_cameras: int = 4
    seed: int = 0
    # eval split sizes, carved from the tail of each identity's images
    query_per_identity: int = 0
    gallery_per_identity: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(self.image_size))
        if self.n_identities < 2:
            raise ConfigError(f"n_identities must be >= 2, got {self.n_identities}")
        if self.images_per_identity < 2:
            raise ConfigError(
                f"images_per_identity must be >= 2, got {self.images_per_identity}"
            )
        h, w = self.image_size
        if h < 32 or w < 32:
            raise ConfigError(f"image_size must be at least 32x32, got {h}x{w}")
        if self.n_cameras < 1:
            raise ConfigError(f"n_cameras must be >= 1, got {self.n_cameras}")
        if self.query_per_identity < 0 or self.gallery_per_identity < 0:
            raise ConfigError("split sizes must be non-negative")
        if self.query_per_identity > 0 and self.gallery_per_identity < 1:
            raise ConfigError("query split requires at least one gallery image per identity")
        if self.query_per_identity + self.gallery_per_identity > self.images_per_identity:
            raise ConfigError("query + gallery exceed images_per_identity")


@dataclass(frozen=True)
class IdentityAttributes:
    shape: str
    body_color: int
    marker_colors: tuple[int, int]
    aspect: float
    layout: str

    def key(self) -> tuple:
        return (self.shape, self.body_color, self.marker_colors, self.aspect, self.layout)


def _draw_attributes(rng: np.random.Generator) -> IdentityAttributes:
    shape = SHAPES[int(rng.integers(len(SHAPES)))]
    body = int(rng.integers(len(BODY_COLORS)))
    first = int(rng.integers(len(MARKER_COLORS)))
    second = int(rng.integers(len(MARKER_COLORS) - 1))
    if second >= first:
        second += 1
    aspect = ASPECTS[int(rng.integers(len(ASPECTS)))]
    layout = LAYOUTS[int(rng.integers(len(LAYOUTS)))]
    return IdentityAttributes(shape, body, (first, second), aspect, layout)


def draw_identity_attributes(n_identities: int, seed: int) -> list[IdentityAttributes]:
    """Assign a distinct attribute tuple to each identity.

    Attributes come from one sequential stream; a collision with an
    earlier identity is resolved by re-drawing.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _ATTR_STREAM])))
    seen: set[tuple] = set()
    out: list[IdentityAttributes] = []
    for _ in range(n_identities):
        attrs = _draw_attributes(rng)
        while attrs.key() in seen:
            attrs = _draw_attributes(rng)
        seen.add(attrs.key())
        out.append(attrs)
    return out


def _body_mask(shape: str, u: np.ndarray, v: np.ndarray, w0: float, h0: float) -> np.ndarray:
    if shape == "box":
        return (np.abs(u) <= w0) & (np.abs(v) <= h0)
    if shape == "ellipse":
        return (u / w0) ** 2 + (v / h0) ** 2 <= 1.0
    # wedge: full height at the left edge tapering to a point at the right
    return (u >= -w0) & (u <= w0) & (np.abs(v) <= h0 * (w0 - u) / (2.0 * w0))


def render_identity_image(
    attrs: IdentityAttributes, rng: np.random.Generator, height: int, width: int
) -> np.ndarray:
    """Render one view of an identity as an HxWx3 float32 array in [0,1]."""
    theta = np.deg2rad(rng.uniform(-ROTATION_DEGREES, ROTATION_DEGREES))
    scale = rng.uniform(*SCALE_RANGE)
    background = rng.uniform(0.55, 0.95, size=3)

    ys = (np.arange(height) + 0.5) / height * 2.0 - 1.0
    xs = (np.arange(width) + 0.5) / width * 2.0 - 1.0
    x, y = np.meshgrid(xs, ys)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    u = (cos_t * x + sin_t * y) / scale
    v = (-sin_t * x + cos_t * y) / scale

    w0 = 0.62
    h0 = w0 * attrs.aspect
    body = _body_mask(attrs.shape, u, v, w0, h0)

    hu, hv = 0.20 * w0, 0.20 * h0
    if attrs.layout == "horizontal":
        centers = ((-0.45 * w0, 0.0), (0.45 * w0, 0.0))
    else:
        centers = ((0.0, -0.45 * h0), (0.0, 0.45 * h0))

    img = np.empty((height, width, 3), dtype=np.float64)
    img[:] = background
    img[body] = BODY_COLORS[attrs.body_color]
    for (cu, cv), color_idx in zip(centers, attrs.marker_colors):
        marker = body & (np.abs(u - cu) <= hu) & (np.abs(v - cv) <= hv)
        img[marker] = MARKER_COLORS[color_idx]

    img += rng.normal(0.0, NOISE_SIGMA, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _image_rng(seed: int, identity: int, image_index: int) -> np.random.Generator:
    ss = np.random.SeedSequence([seed, _IMAGE_STREAM, identity, image_index])
    return np.random.Generator(np.random.PCG64(ss))


def _split_for_index(spec: SyntheticSpec, image_index: int) -> str:
    n_train = spec.images_per_identity - spec.query_per_identity - spec.gallery_per_identity
    if image_index < n_train:
        return "train"
    if image_index < n_train + spec.query_per_identity:
        return "query"
    return "gallery"


def generate_synthetic(spec: SyntheticSpec, out_dir: str) -> DatasetManifest:
    """Render the dataset under out_dir and return its validated manifest.

    Layout: ``<out_dir>/images/*.png`` plus ``<out_dir>/manifest.jsonl``.
    The same spec always produces byte-identical files.
    """
    height, width = spec.image_size
    attrs = draw_identity_attributes(spec.n_identities, spec.seed)
    images_dir = os.path.join(out_dir, "images")
    try:
        os.makedirs(images_dir, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create output directory {images_dir}: {exc}") from exc

    entries = []
    for identity in range(spec.n_identities):
        for idx in range(spec.images_per_identity):
            rng = _image_rng(spec.seed, identity, idx)
            pixels = render_identity_image(attrs[identity], rng, height, width)
            camera = idx % spec.n_cameras
            name = f"id{identity:04d}_im{idx:03d}_cam{camera}.png"
            rel = os.path.join("images", name)
            data = np.rint(pixels * 255.0).astype(np.uint8)
            try:
                Image.fromarray(data).save(os.path.join(out_dir, rel))
            except OSError as exc:
                raise IoError(f"cannot write image {rel}: {exc}") from exc
            entries.append(
                ManifestEntry(rel, identity, camera, _split_for_index(spec, idx))
            )

    manifest_path = os.path.join(out_dir, "manifest.jsonl")
    try:
        save_manifest(entries, manifest_path)
    except OSError as exc:
        raise IoError(f"cannot write manifest: {exc}") from exc
    return load_manifest(manifest_path)
