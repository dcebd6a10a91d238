"""Pluggable encoder interface, the desk-scale reference encoder, and the
student/teacher pair with its exponential-moving-average update."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeMismatchError


class Encoder(nn.Module):
    """Contract for feature extractors.

    forward maps an (N, 3, H, W) float tensor to an (N, embed_dim)
    feature matrix, deterministically in eval mode. Parameter ordering
    must be stable across calls (required for EMA pairing); plain
    nn.Module parameter order satisfies this.
    """

    embed_dim: int


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "tiny"
    embed_dim: int = 64
    widths: tuple[int, ...] = (16, 32, 64, 96)
    blocks_per_stage: int = 1

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))


def _uniform_init(tensor: torch.Tensor, fan_in: int, generator: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        tensor.uniform_(-bound, bound, generator=generator)


class TinyEncoder(Encoder):
    """Small strided conv stack with GroupNorm, GELU, GAP and a linear head.

    Parameter count is an exact function of (widths, blocks_per_stage,
    embed_dim): each conv contributes in*out*9 + out, each norm 2*out,
    the head widths[-1]*embed_dim + embed_dim. Initialization is fully
    determined by the seed. GELU keeps the network smooth, which keeps
    finite-difference gradient checks through the encoder honest.
    """

    def __init__(
        self,
        embed_dim: int = 64,
        widths: tuple[int, ...] = (16, 32, 64, 96),
        blocks_per_stage: int = 1,
        seed: int = 0,
    ):
        super().__init__()
        if embed_dim < 8:
            raise ConfigError(f"embed_dim must be >= 8, got {embed_dim}")
        if not widths or any(w < 4 or w % 4 for w in widths):
            raise ConfigError(f"widths must be multiples of 4, got {widths}")
        if blocks_per_stage < 1:
            raise ConfigError(f"blocks_per_stage must be >= 1, got {blocks_per_stage}")
        self.embed_dim = embed_dim
        self.widths = tuple(widths)
        self.blocks_per_stage = blocks_per_stage

        layers: list[nn.Module] = []
        in_ch = 3
        for width in self.widths:
            for block in range(blocks_per_stage):
                stride = 2 if block == 0 else 1
                layers.append(nn.Conv2d(in_ch, width, kernel_size=3, stride=stride, padding=1))
                layers.append(nn.GroupNorm(4, width))
                layers.append(nn.GELU())
                in_ch = width
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(self.widths[-1], embed_dim)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for mod in self.modules():
            if isinstance(mod, nn.Conv2d):
                fan_in = mod.in_channels * mod.kernel_size[0] * mod.kernel_size[1]
                _uniform_init(mod.weight, fan_in, gen)
                _uniform_init(mod.bias, fan_in, gen)
            elif isinstance(mod, nn.Linear):
                fan_in = mod.in_features
                _uniform_init(mod.weight, fan_in, gen)
                _uniform_init(mod.bias, fan_in, gen)
            elif isinstance(mod, nn.GroupNorm):
                with torch.no_grad():
                    mod.weight.fill_(1.0)
                    mod.bias.fill_(0.0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = self.features(x)
        pooled = F.adaptive_avg_pool2d(feats, 1).flatten(1)
        return self.head(pooled)


def tiny_encoder(embed_dim: int = 64, seed: int = 0, **kwargs) -> TinyEncoder:
    return TinyEncoder(embed_dim=embed_dim, seed=seed, **kwargs)


def build_encoder(cfg: EncoderConfig, seed: int = 0) -> Encoder:
    if cfg.kind == "tiny":
        return TinyEncoder(
            embed_dim=cfg.embed_dim,
            widths=cfg.widths,
            blocks_per_stage=cfg.blocks_per_stage,
            seed=seed,
        )
    raise ConfigError(f"unknown encoder kind {cfg.kind!r}")


class StudentTeacherPair:
    """Two structurally identical models; the teacher follows the student
    as an exponential moving average and is never touched by the
    optimizer."""

    def __init__(self, student: nn.Module, momentum: float, teacher: nn.Module | None = None):
        if not (0.0 <= momentum <= 1.0):
            raise ConfigError(f"EMA momentum must be in [0,1], got {momentum}")
        self.student = student
        self.momentum = momentum
        if teacher is None:
            teacher = copy.deepcopy(student)
        self.teacher = teacher
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        self.teacher.eval()

    def ema_update(self) -> None:
        ema_update(self)


@torch.no_grad()
def ema_update(pair: StudentTeacherPair) -> None:
    """teacher <- momentum * teacher + (1 - momentum) * student, elementwise.

    Covers parameters and floating-point buffers (running statistics
    count as parameters here); integer buffers are copied.
    """
    m = pair.momentum
    s_params = list(pair.student.parameters())
    t_params = list(pair.teacher.parameters())
    if len(s_params) != len(t_params):
        raise ShapeMismatchError(
            f"student has {len(s_params)} parameters, teacher has {len(t_params)}"
        )
    for p_t, p_s in zip(t_params, s_params):
        if p_t.shape != p_s.shape:
            raise ShapeMismatchError(f"parameter shapes differ: {p_t.shape} vs {p_s.shape}")
        p_t.mul_(m).add_(p_s, alpha=1.0 - m)
    s_buffers = list(pair.student.buffers())
    t_buffers = list(pair.teacher.buffers())
    if len(s_buffers) != len(t_buffers):
        raise ShapeMismatchError(
            f"student has {len(s_buffers)} buffers, teacher has {len(t_buffers)}"
        )
    for b_t, b_s in zip(t_buffers, s_buffers):
        if b_t.shape != b_s.shape:
            raise ShapeMismatchError(f"buffer shapes differ: {b_t.shape} vs {b_s.shape}")
        if b_t.dtype.is_floating_point:
            b_t.mul_(m).add_(b_s, alpha=1.0 - m)
        else:
            b_t.copy_(b_s)
