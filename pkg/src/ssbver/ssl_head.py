"""Self-distillation objective: MLP projectors on student and teacher,
teacher centering + sharpening, the multi-view cross-entropy matching
loss and its RMSE alternative, plus collapse diagnostics.

Pairing convention: the teacher is evaluated on the two global views
only, the student on globals and locals; the same-view pairs (two of
them) are excluded, leaving 2*(n_local+1) teacher/student pairs. Losses
divide by that pair count so the loss weight stays meaningful as the
number of local views varies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import ViewBundle
from .errors import ConfigError, EmptyPairError


@dataclass(frozen=True)
class TemperatureSchedule:
    """Fixed student temperature; teacher temperature ramps linearly over
    the warmup epochs then stays at its end value."""

    student: float = 0.1
    teacher_start: float = 0.0005
    teacher_end: float = 0.001
    warmup_epochs: int = 10

    def __post_init__(self):
        if self.student <= 0 or self.teacher_start <= 0 or self.teacher_end <= 0:
            raise ConfigError("temperatures must be positive")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")

    def teacher_at(self, iteration: int, warmup_iterations: int) -> float:
        if warmup_iterations <= 0 or iteration >= warmup_iterations:
            return self.teacher_end
        frac = iteration / warmup_iterations
        return self.teacher_start + (self.teacher_end - self.teacher_start) * frac


@dataclass(frozen=True)
class SslConfig:
    projection_dim: int = 256  # desk-scale default; large runs use 1024+
    hidden_dim: int = 512
    student_temperature: float = 0.1
    teacher_temperature_start: float = 0.0005
    teacher_temperature_end: float = 0.001
    temperature_warmup_epochs: int = 10
    center_momentum: float = 0.9
    center_enabled: bool = True  # False freezes the center at zero
    loss_kind: str = "cross_entropy"  # or "rmse"

    def validate(self) -> None:
        if self.projection_dim < 2 or self.hidden_dim < 1:
            raise ConfigError("projection_dim must be >= 2 and hidden_dim >= 1")
        if self.student_temperature <= 0:
            raise ConfigError("student_temperature must be positive")
        if self.teacher_temperature_start <= 0 or self.teacher_temperature_end <= 0:
            raise ConfigError("teacher temperatures must be positive")
        if not (0.0 <= self.center_momentum < 1.0):
            raise ConfigError("center_momentum must be in [0, 1)")
        if self.loss_kind not in ("cross_entropy", "rmse"):
            raise ConfigError(f"unknown ssl loss kind {self.loss_kind!r}")

    def schedule(self) -> TemperatureSchedule:
        return TemperatureSchedule(
            student=self.student_temperature,
            teacher_start=self.teacher_temperature_start,
            teacher_end=self.teacher_temperature_end,
            warmup_epochs=self.temperature_warmup_epochs,
        )


class Projector(nn.Module):
    """Four GELU hidden layers of equal width, then a plain linear map to
    the projection dimensionality."""

    N_HIDDEN = 4

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, seed: int = 0):
        super().__init__()
        self.out_dim = out_dim
        layers: list[nn.Module] = []
        prev = in_dim
        for _ in range(self.N_HIDDEN):
            layers.append(nn.Linear(prev, hidden_dim))
            layers.append(nn.GELU())
            prev = hidden_dim
        layers.append(nn.Linear(prev, out_dim))
        self.net = nn.Sequential(*layers)
        gen = torch.Generator().manual_seed(seed)
        for mod in self.net:
            if isinstance(mod, nn.Linear):
                bound = 1.0 / math.sqrt(mod.in_features)
                with torch.no_grad():
                    mod.weight.uniform_(-bound, bound, generator=gen)
                    mod.bias.uniform_(-bound, bound, generator=gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class Center:
    """EMA of teacher projections, subtracted before the teacher softmax.

    Initialized at zero; updated only from teacher outputs.
    """

    def __init__(self, dim: int, momentum: float = 0.9, dtype: torch.dtype = torch.float32):
        if not (0.0 <= momentum <= 1.0):
            raise ConfigError(f"center momentum must be in [0,1], got {momentum}")
        self.momentum = momentum
        self.value = torch.zeros(dim, dtype=dtype)

    def update(self, teacher_outputs: torch.Tensor) -> None:
        update_center(self, teacher_outputs)


@torch.no_grad()
def update_center(center: Center, teacher_outputs: torch.Tensor) -> None:
    """center <- m * center + (1-m) * batch mean of teacher outputs."""
    batch = teacher_outputs.detach().reshape(-1, teacher_outputs.shape[-1])
    mean = batch.mean(dim=0).to(center.value.dtype)
    m = center.momentum
    center.value.mul_(m).add_(mean, alpha=1.0 - m)


def student_probs(projection: torch.Tensor, temperature: float) -> torch.Tensor:
    """Softmax of projection / temperature over the last dimension."""
    return F.softmax(projection / temperature, dim=-1)


def teacher_probs(projection: torch.Tensor, center, temperature: float) -> torch.Tensor:
    """Softmax of (projection - center) / temperature; carries no gradient."""
    c = center.value if isinstance(center, Center) else torch.as_tensor(center)
    g = projection.detach()
    return F.softmax((g - c.to(g.dtype)) / temperature, dim=-1)


def _pair_mask(n_views: int, device, dtype) -> torch.Tensor:
    # teacher view i pairs with every student view except the same image
    mask = torch.ones(2, n_views, device=device, dtype=dtype)
    mask[0, 0] = 0.0
    mask[1, 1] = 0.0
    return mask


def multiview_cross_entropy(
    student_proj: torch.Tensor,
    teacher_proj: torch.Tensor,
    center,
    student_temperature: float,
    teacher_temperature: float,
) -> torch.Tensor:
    """Distillation loss over all teacher/student view pairs.

    ``student_proj`` is (..., V, E) with views ordered [global 1,
    global 2, locals...]; ``teacher_proj`` is (..., 2, E) for the two
    globals. Returns the mean over any leading batch dimensions of the
    pair-normalized cross-entropy sum.
    """
    n_views = student_proj.shape[-2]
    if teacher_proj.shape[-2] != 2:
        raise EmptyPairError(f"teacher must see exactly 2 views, got {teacher_proj.shape[-2]}")
    n_pairs = 2 * (n_views - 1)
    if n_pairs <= 0:
        raise EmptyPairError("no teacher/student pairs to match")
    log_ps = F.log_softmax(student_proj / student_temperature, dim=-1)
    pt = teacher_probs(teacher_proj, center, teacher_temperature)
    ce = -torch.einsum("...te,...se->...ts", pt.to(log_ps.dtype), log_ps)
    mask = _pair_mask(n_views, ce.device, ce.dtype)
    return ((ce * mask).sum(dim=(-2, -1)) / n_pairs).mean()


def multiview_rmse(student_proj: torch.Tensor, teacher_proj: torch.Tensor) -> torch.Tensor:
    """L2 distance between student and teacher projections over the same
    view pairs and with the same normalization as the cross-entropy loss."""
    n_views = student_proj.shape[-2]
    if teacher_proj.shape[-2] != 2:
        raise EmptyPairError(f"teacher must see exactly 2 views, got {teacher_proj.shape[-2]}")
    n_pairs = 2 * (n_views - 1)
    if n_pairs <= 0:
        raise EmptyPairError("no teacher/student pairs to match")
    gt = teacher_proj.detach().to(student_proj.dtype)
    diff = student_proj.unsqueeze(-3) - gt.unsqueeze(-2)  # (..., 2, V, E)
    norms = diff.pow(2).sum(-1).clamp_min(1e-30).sqrt()
    mask = _pair_mask(n_views, norms.device, norms.dtype)
    return ((norms * mask).sum(dim=(-2, -1)) / n_pairs).mean()


def _bundle_projections(bundle: ViewBundle, student_project, teacher_project):
    views = list(bundle.globals) + list(bundle.locals)
    gs = torch.stack([student_project(v) for v in views])
    gt = torch.stack([teacher_project(v) for v in bundle.globals]).detach()
    return gs, gt


def dino_loss(
    bundle: ViewBundle,
    student_project,
    teacher_project,
    center,
    student_temperature: float,
    teacher_temperature: float,
) -> torch.Tensor:
    """Matching loss for one view bundle given projection callables.

    ``student_project`` / ``teacher_project`` map a single HxWx3 view to
    an E-dimensional projection tensor. Gradients reach only the student
    side.
    """
    gs, gt = _bundle_projections(bundle, student_project, teacher_project)
    return multiview_cross_entropy(gs, gt, center, student_temperature, teacher_temperature)


def rmse_loss(bundle: ViewBundle, student_project, teacher_project) -> torch.Tensor:
    """RMSE alternative to the matching loss, over the same pairs."""
    gs, gt = _bundle_projections(bundle, student_project, teacher_project)
    return multiview_rmse(gs, gt)


def probability_entropy(probs: torch.Tensor) -> torch.Tensor:
    """Mean Shannon entropy of rows (natural log)."""
    return -torch.special.xlogy(probs, probs).sum(dim=-1).mean()


class CollapseMonitor:
    """Detects the two degenerate solutions of the matching objective.

    Uniform collapse: mean teacher-probability entropy stays above
    ``uniform_fraction * log(dim)`` for ``uniform_patience`` consecutive
    steps. Dominance collapse: one output dimension's mean teacher
    probability exceeds ``dominance_threshold``. Both flags latch.
    """

    def __init__(
        self,
        dim: int,
        uniform_fraction: float = 0.99,
        uniform_patience: int = 50,
        dominance_threshold: float = 0.9,
    ):
        self.dim = dim
        self.uniform_fraction = uniform_fraction
        self.uniform_patience = uniform_patience
        self.dominance_threshold = dominance_threshold
        self.uniform_streak = 0
        self.uniform_fired = False
        self.dominance_fired = False
        self.last_entropy = 0.0

    def observe(self, teacher_prob_rows: torch.Tensor) -> None:
        probs = teacher_prob_rows.detach().reshape(-1, self.dim)
        entropy = float(probability_entropy(probs))
        self.last_entropy = entropy
        if entropy > self.uniform_fraction * math.log(self.dim):
            self.uniform_streak += 1
        else:
            self.uniform_streak = 0
        if self.uniform_streak >= self.uniform_patience:
            self.uniform_fired = True
        if float(probs.mean(dim=0).max()) > self.dominance_threshold:
            self.dominance_fired = True

    def state(self) -> dict:
        return {
            "uniform_streak": self.uniform_streak,
            "uniform_fired": self.uniform_fired,
            "dominance_fired": self.dominance_fired,
        }

    def load_state(self, state: dict) -> None:
        self.uniform_streak = int(state["uniform_streak"])
        self.uniform_fired = bool(state["uniform_fired"])
        self.dominance_fired = bool(state["dominance_fired"])
