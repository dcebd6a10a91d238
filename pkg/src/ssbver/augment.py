"""Global/local view construction for the self-distillation objective.

Global views: random crop with area ratio in ``global_area_range``
(aspect preserved), zero-padded back to the source extent, resized,
flipped, color-jittered and randomly erased. Local views: small random
crop (area ratio in ``local_area_range``, aspect jittered), resized,
flipped and color-jittered -- no erasing.

All functions are pure given (sample, config, rng); callers parallelize
by handing each sample an independent rng substream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .datamodel import ImageSample
from .errors import ConfigError


@dataclass(frozen=True)
class AugmentConfig:
    global_size: int = 128
    local_size: int = 64
    n_local: int = 4
    global_area_range: tuple[float, float] = (0.8, 1.0)
    local_area_range: tuple[float, float] = (0.1, 0.4)
    flip_prob: float = 0.5
    jitter_range: tuple[float, float] = (0.8, 1.2)  # brightness/contrast/saturation
    hue_range: tuple[float, float] = (-0.05, 0.05)
    erase_prob: float = 0.5
    erase_area_range: tuple[float, float] = (0.02, 0.2)
    aspect_range: tuple[float, float] = (0.75, 4.0 / 3.0)  # local crops only

    def __post_init__(self):
        for name in ("global_area_range", "local_area_range", "jitter_range",
                     "hue_range", "erase_area_range", "aspect_range"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def validate(self) -> None:
        g_lo, g_hi = self.global_area_range
        l_lo, l_hi = self.local_area_range
        if not (0.0 < g_lo <= g_hi <= 1.0):
            raise ConfigError(f"global_area_range invalid: {self.global_area_range}")
        if not (0.0 < l_lo <= l_hi <= 1.0):
            raise ConfigError(f"local_area_range invalid: {self.local_area_range}")
        if l_hi > g_lo:
            raise ConfigError(
                f"local area max {l_hi} must not exceed global area min {g_lo}"
            )
        if self.n_local < 0:
            raise ConfigError(f"n_local must be >= 0, got {self.n_local}")
        if self.global_size < 1 or self.local_size < 1:
            raise ConfigError("view sizes must be positive")
        if not (0.0 <= self.flip_prob <= 1.0):
            raise ConfigError(f"flip_prob outside [0,1]: {self.flip_prob}")
        if not (0.0 <= self.erase_prob <= 1.0):
            raise ConfigError(f"erase_prob outside [0,1]: {self.erase_prob}")
        j_lo, j_hi = self.jitter_range
        if not (0.0 <= j_lo <= j_hi):
            raise ConfigError(f"jitter_range invalid: {self.jitter_range}")
        e_lo, e_hi = self.erase_area_range
        if not (0.0 < e_lo <= e_hi <= 1.0):
            raise ConfigError(f"erase_area_range invalid: {self.erase_area_range}")
        a_lo, a_hi = self.aspect_range
        if not (0.0 < a_lo <= a_hi):
            raise ConfigError(f"aspect_range invalid: {self.aspect_range}")


@dataclass(frozen=True)
class ViewBundle:
    """Per-image view set: exactly two global views plus n local views."""

    globals: tuple[np.ndarray, ...]
    locals: tuple[np.ndarray, ...]
    source: ImageSample

    def __post_init__(self):
        object.__setattr__(self, "globals", tuple(self.globals))
        object.__setattr__(self, "locals", tuple(self.locals))
        if len(self.globals) != 2:
            raise ConfigError(f"bundle needs exactly 2 global views, got {len(self.globals)}")

    @property
    def identity(self) -> int:
        return self.source.identity

    @property
    def n_local(self) -> int:
        return len(self.locals)


def resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an HxWx3 float array."""
    if img.shape[0] == out_h and img.shape[1] == out_w:
        return np.ascontiguousarray(img, dtype=np.float32)
    t = torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1), dtype=np.float32))
    out = F.interpolate(t[None], size=(out_h, out_w), mode="bilinear", align_corners=False)
    return np.clip(out[0].permute(1, 2, 0).contiguous().numpy(), 0.0, 1.0)


def crop_geometry(
    height: int,
    width: int,
    area_range: tuple[float, float],
    aspect_range: tuple[float, float] | None,
    rng: np.random.Generator,
) -> tuple[int, int, int, int]:
    """Sample (top, left, crop_h, crop_w) with realized area ratio in range.

    ``aspect_range`` of None preserves the source aspect. Integer
    rounding is corrected so crop_h*crop_w/(height*width) always lands
    inside ``area_range``.
    """
    lo, hi = area_range
    area = rng.uniform(lo, hi)
    if aspect_range is None:
        ch = min(height, math.ceil(math.sqrt(area) * height))
        cw = min(width, math.ceil(math.sqrt(area) * width))
    else:
        aspect = rng.uniform(*aspect_range)
        base = math.sqrt(area * height * width)
        ch = int(round(base * math.sqrt(aspect)))
        cw = int(round(base / math.sqrt(aspect)))
        ch = min(max(ch, 1), height)
        cw = min(max(cw, 1), width)
    total = height * width
    # integer rounding can push the realized ratio out of range; nudge back
    for _ in range(height + width):
        ratio = ch * cw / total
        if ratio > hi:
            if ch / height >= cw / width and ch > 1:
                ch -= 1
            elif cw > 1:
                cw -= 1
            else:
                break
        elif ratio < lo:
            if ch / height <= cw / width and ch < height:
                ch += 1
            elif cw < width:
                cw += 1
            else:
                break
        else:
            break
    top = int(rng.integers(0, height - ch + 1))
    left = int(rng.integers(0, width - cw + 1))
    return top, left, ch, cw


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = np.max(rgb, axis=-1)
    minc = np.min(rgb, axis=-1)
    v = maxc
    delta = maxc - minc
    safe = np.maximum(delta, 1e-12)
    s = np.where(maxc > 0, delta / np.maximum(maxc, 1e-12), 0.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0).astype(np.int64) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def color_jitter(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Brightness, contrast, saturation factors plus a hue shift."""
    brightness = rng.uniform(*cfg.jitter_range)
    contrast = rng.uniform(*cfg.jitter_range)
    saturation = rng.uniform(*cfg.jitter_range)
    hue = rng.uniform(*cfg.hue_range)

    out = np.clip(img * brightness, 0.0, 1.0)
    mean = out.mean()
    out = np.clip((out - mean) * contrast + mean, 0.0, 1.0)
    gray = (0.299 * out[..., 0] + 0.587 * out[..., 1] + 0.114 * out[..., 2])[..., None]
    out = np.clip(gray + (out - gray) * saturation, 0.0, 1.0)
    if hue != 0.0:
        hsv = _rgb_to_hsv(out)
        hsv[..., 0] = (hsv[..., 0] + hue) % 1.0
        out = np.clip(_hsv_to_rgb(hsv), 0.0, 1.0)
    return out.astype(np.float32)


def _random_erase(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    if rng.random() >= cfg.erase_prob:
        return img
    h, w = img.shape[:2]
    top, left, eh, ew = crop_geometry(h, w, cfg.erase_area_range, cfg.aspect_range, rng)
    out = img.copy()
    out[top : top + eh, left : left + ew] = 0.0
    return out


def _maybe_flip(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    if rng.random() < cfg.flip_prob:
        return img[:, ::-1].copy()
    return img


def make_global_views(
    sample: ImageSample, cfg: AugmentConfig, rng: np.random.Generator
) -> list[np.ndarray]:
    """Two independently augmented global views at global_size resolution."""
    cfg.validate()
    src = sample.pixels
    h, w = src.shape[:2]
    views = []
    for _ in range(2):
        top, left, ch, cw = crop_geometry(h, w, cfg.global_area_range, None, rng)
        padded = np.zeros_like(src)
        padded[top : top + ch, left : left + cw] = src[top : top + ch, left : left + cw]
        view = resize(padded, cfg.global_size, cfg.global_size)
        view = _maybe_flip(view, cfg, rng)
        view = color_jitter(view, cfg, rng)
        view = _random_erase(view, cfg, rng)
        views.append(np.ascontiguousarray(view, dtype=np.float32))
    return views


def make_local_views(
    sample: ImageSample, cfg: AugmentConfig, rng: np.random.Generator
) -> list[np.ndarray]:
    """n_local small-crop views at local_size resolution (no erasing)."""
    cfg.validate()
    src = sample.pixels
    h, w = src.shape[:2]
    views = []
    for _ in range(cfg.n_local):
        top, left, ch, cw = crop_geometry(h, w, cfg.local_area_range, cfg.aspect_range, rng)
        crop = src[top : top + ch, left : left + cw]
        view = resize(crop, cfg.local_size, cfg.local_size)
        view = _maybe_flip(view, cfg, rng)
        view = color_jitter(view, cfg, rng)
        views.append(np.ascontiguousarray(view, dtype=np.float32))
    return views


def make_view_bundle(
    sample: ImageSample, cfg: AugmentConfig, rng: np.random.Generator
) -> ViewBundle:
    """Build the full per-image view set (globals first, then locals)."""
    return ViewBundle(
        globals=make_global_views(sample, cfg, rng),
        locals=make_local_views(sample, cfg, rng),
        source=sample,
    )
