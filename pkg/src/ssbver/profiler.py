"""Efficiency-metric measurement: parameter count, single-image latency,
peak forward memory and embedding dimensionality.

Latency is the median over measured iterations with a warmup discarded,
so scheduler noise does not skew the report. Numbers are hardware
relative; the hardware descriptor travels with every report. Peak memory
is the process high-water mark around the forward calls and is
approximate on shared machines.
"""

from __future__ import annotations

import json
import platform
import resource
import statistics
import time
from dataclasses import asdict, dataclass

import torch

from .errors import ConfigError

_training_active = 0


def mark_training_active() -> None:
    global _training_active
    _training_active += 1


def mark_training_idle() -> None:
    global _training_active
    _training_active = max(0, _training_active - 1)


def _require_idle() -> None:
    if _training_active:
        raise ConfigError("profiling requires exclusive access; training is running")


@dataclass(frozen=True)
class EfficiencyReport:
    params_millions: float
    ms_per_image: float
    peak_memory_mb: float
    dims: int
    hardware_descriptor: str

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def hardware_descriptor() -> str:
    return (
        f"{platform.platform()} | {platform.processor() or platform.machine()} | "
        f"torch {torch.__version__} | {torch.get_num_threads()} threads"
    )


def count_params(module: torch.nn.Module) -> int:
    """Exact sum of parameter element counts."""
    return sum(p.numel() for p in module.parameters())


def peak_memory_mb() -> float:
    """Process peak RSS in MB (Linux ru_maxrss is in KB)."""
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


@torch.no_grad()
def measure_latency(
    encoder: torch.nn.Module,
    image_size: tuple[int, int] = (128, 128),
    warmup: int = 20,
    iters: int = 100,
) -> float:
    """Median wall-clock milliseconds for a batch-1 forward pass."""
    if iters < 10:
        raise ConfigError(f"iters must be >= 10, got {iters}")
    if warmup < 0:
        raise ConfigError(f"warmup must be >= 0, got {warmup}")
    _require_idle()
    encoder.eval()
    h, w = image_size
    dtype = next(encoder.parameters()).dtype
    image = torch.full((1, 3, h, w), 0.5, dtype=dtype)
    for _ in range(warmup):
        encoder(image)
    timings = []
    for _ in range(iters):
        start = time.perf_counter()
        encoder(image)
        timings.append((time.perf_counter() - start) * 1000.0)
    return statistics.median(timings)


def profile_encoder(
    encoder: torch.nn.Module,
    image_size: tuple[int, int] = (128, 128),
    warmup: int = 20,
    iters: int = 100,
) -> EfficiencyReport:
    """Full efficiency report for one encoder."""
    _require_idle()
    latency = measure_latency(encoder, image_size, warmup=warmup, iters=iters)
    return EfficiencyReport(
        params_millions=count_params(encoder) / 1e6,
        ms_per_image=latency,
        peak_memory_mb=peak_memory_mb(),
        dims=int(getattr(encoder, "embed_dim", 0)),
        hardware_descriptor=hardware_descriptor(),
    )
