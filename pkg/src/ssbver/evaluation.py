"""Retrieval evaluation and analysis tools.

Retrieval uses post-bottleneck, L2-normalized teacher features with
Euclidean distance (same ordering as cosine on normalized vectors).
The default junk filter is the cross-camera protocol: gallery entries
sharing BOTH identity and camera with the query are excluded; protocol
"none" excludes nothing. Ties in distance break by ascending gallery
index so rankings are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .datamodel import EmbeddingMatrix
from .errors import ConfigError, DegenerateError, NoMatchError

PROTOCOLS = ("cross_camera", "none")


@torch.no_grad()
def extract_embeddings(encoder, samples, neck=None, batch_size: int = 64) -> EmbeddingMatrix:
    """Encode samples, apply the eval-mode bottleneck, L2-normalize rows."""
    encoder.eval()
    if neck is not None:
        neck.eval()
    chunks = []
    for start in range(0, len(samples), batch_size):
        part = samples[start : start + batch_size]
        arr = np.stack([np.ascontiguousarray(s.pixels.transpose(2, 0, 1)) for s in part])
        feats = encoder(torch.from_numpy(arr))
        if neck is not None:
            feats = neck(feats)
        chunks.append(feats.double())
    rows = torch.cat(chunks, dim=0)
    rows = rows / rows.norm(dim=1, keepdim=True).clamp_min(1e-12)
    return EmbeddingMatrix(rows.numpy(), dim=rows.shape[1], normalized=True)


def pairwise_l2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distances between all row pairs of a and b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))


def junk_mask(
    query_label: int,
    query_camera: int,
    gallery_labels: np.ndarray,
    gallery_cameras: np.ndarray,
    protocol: str,
) -> np.ndarray:
    if protocol == "none":
        return np.zeros(len(gallery_labels), dtype=bool)
    if protocol == "cross_camera":
        return (np.asarray(gallery_labels) == query_label) & (
            np.asarray(gallery_cameras) == query_camera
        )
    raise ConfigError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")


@dataclass(frozen=True)
class RankedResult:
    """Gallery ranking for one query after junk filtering."""

    query_index: int
    order: np.ndarray  # non-junk gallery indices by ascending distance
    relevance: np.ndarray  # bool, parallel to order
    junk: np.ndarray  # bool over the full gallery


def rank_gallery(
    distances_row: np.ndarray,
    query_index: int,
    query_label: int,
    query_camera: int,
    gallery_labels: np.ndarray,
    gallery_cameras: np.ndarray,
    protocol: str = "cross_camera",
) -> RankedResult:
    junk = junk_mask(query_label, query_camera, gallery_labels, gallery_cameras, protocol)
    keep = np.flatnonzero(~junk)
    dist = np.asarray(distances_row, dtype=np.float64)[keep]
    order = keep[np.lexsort((keep, dist))]
    relevance = np.asarray(gallery_labels)[order] == query_label
    return RankedResult(query_index, order, relevance, junk)


def _ap_from_relevance(relevance: np.ndarray, query_index) -> float:
    hits = np.flatnonzero(relevance)
    if hits.size == 0:
        raise NoMatchError(f"query {query_index} has no valid gallery match")
    ranks = hits + 1  # 1-based rank of each true match
    precisions = np.arange(1, hits.size + 1, dtype=np.float64) / ranks
    return float(precisions.mean())


def average_precision(
    query_embedding: np.ndarray,
    query_label: int,
    query_camera: int,
    gallery_embeddings: np.ndarray,
    gallery_labels: np.ndarray,
    gallery_cameras: np.ndarray,
    protocol: str = "cross_camera",
) -> float:
    """AP of one query: mean over true-match ranks r of (#matches<=r)/r."""
    dist = pairwise_l2(query_embedding[None, :], gallery_embeddings)[0]
    ranked = rank_gallery(
        dist, 0, query_label, query_camera, gallery_labels, gallery_cameras, protocol
    )
    return _ap_from_relevance(ranked.relevance, 0)


def _ranked_all(
    query_embeddings,
    query_labels,
    query_cameras,
    gallery_embeddings,
    gallery_labels,
    gallery_cameras,
    protocol,
):
    dists = pairwise_l2(query_embeddings, gallery_embeddings)
    return [
        rank_gallery(
            dists[i],
            i,
            int(query_labels[i]),
            int(query_cameras[i]),
            gallery_labels,
            gallery_cameras,
            protocol,
        )
        for i in range(len(query_embeddings))
    ]


def mean_ap(
    query_embeddings,
    query_labels,
    query_cameras,
    gallery_embeddings,
    gallery_labels,
    gallery_cameras,
    protocol: str = "cross_camera",
) -> float:
    """Mean of per-query average precision; a matchless query is an error."""
    ranked = _ranked_all(
        query_embeddings, query_labels, query_cameras,
        gallery_embeddings, gallery_labels, gallery_cameras, protocol,
    )
    aps = [_ap_from_relevance(r.relevance, r.query_index) for r in ranked]
    return float(np.mean(aps))


def cmc(
    query_embeddings,
    query_labels,
    query_cameras,
    gallery_embeddings,
    gallery_labels,
    gallery_cameras,
    k: int,
    protocol: str = "cross_camera",
) -> float:
    """Fraction of queries with at least one true match in the top k."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    ranked = _ranked_all(
        query_embeddings, query_labels, query_cameras,
        gallery_embeddings, gallery_labels, gallery_cameras, protocol,
    )
    hits = 0
    for r in ranked:
        if not r.relevance.any():
            raise NoMatchError(f"query {r.query_index} has no valid gallery match")
        if r.relevance[:k].any():
            hits += 1
    return hits / len(ranked)


def evaluate_retrieval(
    query_embeddings,
    query_labels,
    query_cameras,
    gallery_embeddings,
    gallery_labels,
    gallery_cameras,
    protocol: str = "cross_camera",
    cmc_ks: tuple[int, ...] = (1, 5, 10),
) -> dict:
    """mAP plus CMC@k for several k in one ranking pass."""
    ranked = _ranked_all(
        query_embeddings, query_labels, query_cameras,
        gallery_embeddings, gallery_labels, gallery_cameras, protocol,
    )
    aps = []
    first_match = []
    for r in ranked:
        aps.append(_ap_from_relevance(r.relevance, r.query_index))
        first_match.append(int(np.flatnonzero(r.relevance)[0]) + 1)
    first_match = np.array(first_match)
    return {
        "protocol": protocol,
        "mAP": float(np.mean(aps)),
        "cmc": {int(k): float((first_match <= k).mean()) for k in cmc_ks},
        "n_query": len(ranked),
        "n_gallery": int(len(gallery_labels)),
    }


@dataclass(frozen=True)
class DistanceReport:
    """Positive/negative pair distance distributions on normalized embeddings."""

    positive: np.ndarray
    negative: np.ndarray
    mu_pos: float
    mu_neg: float
    bin_edges: np.ndarray
    pos_counts: np.ndarray
    neg_counts: np.ndarray


def distance_report(rows: np.ndarray, labels, n_bins: int = 64,
                    span: tuple[float, float] = (0.0, 2.0)) -> DistanceReport:
    """Classify all unordered pairs as positive/negative and histogram
    their L2 distances over [0, 2]."""
    rows = np.asarray(rows, dtype=np.float64)
    labels = np.asarray(labels)
    n = rows.shape[0]
    if n < 2:
        raise DegenerateError(f"need at least 2 samples, got {n}")
    if len(np.unique(labels)) < 2:
        raise DegenerateError("need at least 2 identities")
    dist = pairwise_l2(rows, rows)
    iu, ju = np.triu_indices(n, k=1)
    values = dist[iu, ju]
    same = labels[iu] == labels[ju]
    positive = values[same]
    negative = values[~same]
    if positive.size == 0:
        raise DegenerateError("no positive pairs: every identity occurs once")
    edges = np.linspace(span[0], span[1], n_bins + 1)
    pos_counts, _ = np.histogram(np.clip(positive, *span), bins=edges)
    neg_counts, _ = np.histogram(np.clip(negative, *span), bins=edges)
    return DistanceReport(
        positive=positive,
        negative=negative,
        mu_pos=float(positive.mean()),
        mu_neg=float(negative.mean()),
        bin_edges=edges,
        pos_counts=pos_counts,
        neg_counts=neg_counts,
    )


def write_distance_report(report: DistanceReport, csv_path, json_path) -> None:
    import json as _json

    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("bin_left,bin_right,pos_count,neg_count\n")
        for i in range(len(report.pos_counts)):
            fh.write(
                f"{report.bin_edges[i]!r},{report.bin_edges[i + 1]!r},"
                f"{int(report.pos_counts[i])},{int(report.neg_counts[i])}\n"
            )
    with open(json_path, "w", encoding="utf-8") as fh:
        _json.dump(
            {
                "mu_pos": report.mu_pos,
                "mu_neg": report.mu_neg,
                "n_positive_pairs": int(report.positive.size),
                "n_negative_pairs": int(report.negative.size),
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")


# --- input-gradient saliency -------------------------------------------


@dataclass(frozen=True)
class SaliencyResult:
    query_map: np.ndarray
    gallery_map: np.ndarray
    score: float


def _embed_differentiable(pixels: torch.Tensor, encoder, neck):
    feats = encoder(pixels)
    if neck is not None:
        feats = neck(feats)
    return feats / feats.norm(dim=1, keepdim=True).clamp_min(1e-12)


def similarity_and_gradients(query_pixels, gallery_pixels, encoder, neck=None):
    """Similarity score of the two images' normalized embeddings and its
    raw gradient with respect to each input image (HxWx3)."""
    encoder.eval()
    if neck is not None:
        neck.eval()
    dtype = next(encoder.parameters()).dtype

    def prep(img):
        arr = np.ascontiguousarray(np.asarray(img, dtype=np.float64).transpose(2, 0, 1))
        t = torch.from_numpy(arr).to(dtype)[None]
        return t.requires_grad_(True)

    tq = prep(query_pixels)
    tg = prep(gallery_pixels)
    eq = _embed_differentiable(tq, encoder, neck)
    eg = _embed_differentiable(tg, encoder, neck)
    score = (eq * eg).sum()
    grad_q, grad_g = torch.autograd.grad(score, [tq, tg])
    to_hwc = lambda g: g[0].permute(1, 2, 0).detach().cpu().numpy()
    return float(score.detach()), to_hwc(grad_q), to_hwc(grad_g)


def _normalize_map(raw: np.ndarray) -> np.ndarray:
    reduced = np.abs(raw).max(axis=2)
    lo, hi = float(reduced.min()), float(reduced.max())
    if hi - lo <= 0.0:
        return np.zeros_like(reduced)
    return (reduced - lo) / (hi - lo)


def saliency_pair(query_pixels, gallery_pixels, encoder, neck=None) -> SaliencyResult:
    """Input-gradient saliency of the pair similarity score.

    The per-pixel gradient is channel-reduced by the max of absolute
    values and min-max normalized to [0, 1]; an all-zero gradient map
    stays zero.
    """
    score, grad_q, grad_g = similarity_and_gradients(query_pixels, gallery_pixels, encoder, neck)
    return SaliencyResult(
        query_map=_normalize_map(grad_q),
        gallery_map=_normalize_map(grad_g),
        score=score,
    )


def saliency_overlay(pixels: np.ndarray, smap: np.ndarray, alpha: float = 0.55) -> np.ndarray:
    """Blend a saliency heat ramp (blue -> red) over the image, as uint8."""
    heat = np.stack(
        [smap, np.clip(0.9 - np.abs(2.0 * smap - 1.0), 0.0, 1.0) * 0.5, 1.0 - smap], axis=2
    )
    blended = np.clip((1.0 - alpha) * np.asarray(pixels) + alpha * heat, 0.0, 1.0)
    return np.rint(blended * 255.0).astype(np.uint8)


def embeddings_for_entries(encoder, neck, manifest, split: str, batch_size: int = 64):
    """Embeddings plus label/camera arrays for one manifest split."""
    from .dataio import load_samples

    samples = load_samples(manifest, split)
    emb = extract_embeddings(encoder, samples, neck=neck, batch_size=batch_size)
    labels = np.array([s.identity for s in samples], dtype=np.int64)
    cameras = np.array([s.camera for s in samples], dtype=np.int64)
    return emb, labels, cameras
