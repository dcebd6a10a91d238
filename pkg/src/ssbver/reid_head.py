"""Supervised re-identification objective on student features.

The bottleneck normalizes features with batch statistics (no affine
transform), a linear classifier produces identity logits, and the two
losses are the soft-margin batch-hard triplet loss on raw features and
label-smoothed cross-entropy on the logits. Both losses reduce by the
per-anchor/per-sample mean so the loss weights stay batch-size
invariant.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DegenerateBatchError, MiningError, RangeError

VAR_FLOOR = 1e-5


class BottleneckNorm(nn.Module):
    """Batch normalization without affine parameters.

    Train mode normalizes with batch statistics (biased variance plus a
    1e-5 floor) and updates running statistics with momentum 0.1; eval
    mode normalizes with the running statistics.
    """

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = VAR_FLOOR):
        super().__init__()
        self.dim = dim
        self.momentum = momentum
        self.eps = eps
        self.register_buffer("running_mean", torch.zeros(dim))
        self.register_buffer("running_var", torch.ones(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.training:
            if x.shape[0] < 2:
                raise DegenerateBatchError(
                    f"batch statistics need N >= 2, got N = {x.shape[0]}"
                )
            mean = x.mean(dim=0)
            var = x.var(dim=0, unbiased=False)
            out = (x - mean) / torch.sqrt(var + self.eps)
            with torch.no_grad():
                m = self.momentum
                self.running_mean.mul_(1.0 - m).add_(mean.detach().to(self.running_mean.dtype), alpha=m)
                self.running_var.mul_(1.0 - m).add_(var.detach().to(self.running_var.dtype), alpha=m)
            return out
        rm = self.running_mean.to(x.dtype)
        rv = self.running_var.to(x.dtype)
        return (x - rm) / torch.sqrt(rv + self.eps)


class ReIdHead(nn.Module):
    """Bottleneck + k-way linear classifier over normalized features."""

    def __init__(self, feature_dim: int, n_classes: int, seed: int = 0):
        super().__init__()
        self.feature_dim = feature_dim
        self.n_classes = n_classes
        self.neck = BottleneckNorm(feature_dim)
        self.classifier = nn.Linear(feature_dim, n_classes)
        gen = torch.Generator().manual_seed(seed)
        bound = 1.0 / math.sqrt(feature_dim)
        with torch.no_grad():
            self.classifier.weight.uniform_(-bound, bound, generator=gen)
            self.classifier.bias.uniform_(-bound, bound, generator=gen)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.neck(features))


def pairwise_distances(x: torch.Tensor) -> torch.Tensor:
    """All-pairs Euclidean distances of row vectors."""
    diff = x.unsqueeze(1) - x.unsqueeze(0)
    return diff.pow(2).sum(-1).clamp_min(1e-30).sqrt()


def triplet_loss(features: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Soft-margin triplet loss with batch-hard mining, mean over anchors.

    Per anchor: log(1 + exp(max positive distance - min negative
    distance)) where positives share the anchor's label and negatives do
    not.
    """
    if features.ndim != 2:
        raise MiningError(f"features must be NxD, got shape {tuple(features.shape)}")
    labels = torch.as_tensor(labels, device=features.device).reshape(-1)
    n = features.shape[0]
    if labels.shape[0] != n:
        raise MiningError(f"{n} features but {labels.shape[0]} labels")
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    eye = torch.eye(n, dtype=torch.bool, device=features.device)
    pos_mask = same & ~eye
    neg_mask = ~same
    if not bool(pos_mask.any(dim=1).all()):
        raise MiningError("an anchor has no positive in the batch")
    if not bool(neg_mask.any(dim=1).all()):
        raise MiningError("an anchor has no negative in the batch")
    dist = pairwise_distances(features)
    hardest_pos = dist.masked_fill(~pos_mask, float("-inf")).max(dim=1).values
    hardest_neg = dist.masked_fill(~neg_mask, float("inf")).min(dim=1).values
    return F.softplus(hardest_pos - hardest_neg).mean()


def smooth_targets(class_index: int, n_classes: int, smoothing: float,
                   dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Label-smoothed target vector: 1 - smoothing*(k-1)/k at the true
    class, smoothing/k elsewhere."""
    if not (0 <= class_index < n_classes):
        raise RangeError(f"class_index {class_index} outside [0, {n_classes})")
    if not (0.0 <= float(smoothing) <= 1.0):
        raise RangeError(f"smoothing {smoothing} outside [0, 1]")
    target = torch.full((n_classes,), float(smoothing) / n_classes, dtype=dtype)
    target[class_index] = 1.0 - float(smoothing) * (n_classes - 1) / n_classes
    return target


def _smooth_target_matrix(labels: torch.Tensor, n_classes: int, smoothing,
                          dtype: torch.dtype) -> torch.Tensor:
    one_hot = F.one_hot(labels, n_classes).to(dtype)
    if torch.is_tensor(smoothing):
        eps = smoothing.to(dtype)
    else:
        eps = torch.as_tensor(float(smoothing), dtype=dtype)
    on = 1.0 - eps * (n_classes - 1) / n_classes
    off = eps / n_classes
    return one_hot * on + (1 - one_hot) * off


def ce_loss(logits: torch.Tensor, labels: torch.Tensor, smoothing=0.0) -> torch.Tensor:
    """Cross-entropy against label-smoothed targets, mean over samples.

    Softmax is computed with max-subtraction (log_softmax) for
    stability.
    """
    if logits.ndim != 2:
        raise RangeError(f"logits must be NxK, got shape {tuple(logits.shape)}")
    labels = torch.as_tensor(labels, device=logits.device).reshape(-1)
    if labels.shape[0] != logits.shape[0]:
        raise RangeError(f"{logits.shape[0]} logit rows but {labels.shape[0]} labels")
    eps = float(smoothing.detach() if torch.is_tensor(smoothing) else smoothing)
    if not (0.0 <= eps <= 1.0):
        raise RangeError(f"smoothing {eps} outside [0, 1]")
    log_probs = F.log_softmax(logits, dim=-1)
    targets = _smooth_target_matrix(labels, logits.shape[1], smoothing, log_probs.dtype)
    return -(targets * log_probs).sum(dim=-1).mean()
