"""End-to-end training loop: view routing, total loss, optimizer and
schedule management, EMA and center updates, checkpointing and loss
logging.

Reference mode is single-threaded and bit-deterministic: all sampling
and augmentation randomness derives from (seed, stream tag, epoch/step
indices), so an interrupted run resumed from a checkpoint reproduces the
uninterrupted run exactly.
"""

from __future__ import annotations

import dataclasses
import io
import json
import math
import os
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import profiler as _profiler
from .augment import AugmentConfig, make_view_bundle
from .backbone import EncoderConfig, StudentTeacherPair, build_encoder
from .config import config_from_dict, config_to_dict
from .dataio import DatasetManifest, load_samples
from .datamodel import Batch
from .errors import ConfigError, DataError, NonFiniteLossError
from .reid_head import ReIdHead, ce_loss, triplet_loss
from .ssl_head import (
    Center,
    CollapseMonitor,
    Projector,
    SslConfig,
    multiview_cross_entropy,
    multiview_rmse,
    teacher_probs,
)

CHECKPOINT_FORMAT = "ssbver-checkpoint-v1"

_SAMPLER_STREAM = 1
_AUGMENT_STREAM = 2
_ENCODER_SEED_TAG = 10
_PROJECTOR_SEED_TAG = 11
_HEAD_SEED_TAG = 12


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 120
    p_identities: int = 4
    k_instances: int = 4
    class_weight: float = 1.0
    triplet_weight: float = 1.0
    ssl_weight: float = 1.0
    label_smoothing: float = 0.2
    ema_momentum: float = 0.9995
    optimizer: str = "adamw"
    lr_schedule: str = "step"  # or "cosine"
    base_lr: float = 5e-4
    min_lr: float = 1.6e-5  # cosine floor
    gamma: float = 0.1
    milestones: tuple[int, ...] = (40, 70, 100)
    warmup_epochs: int = 10
    warmup_rate: float = 0.099
    weight_decay: float = 1e-3
    checkpoint_every: int = 0  # epochs between mid-run checkpoints; 0 = final only
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    ssl: SslConfig = field(default_factory=SslConfig)

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(self.milestones))

    def validate(self) -> None:
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.p_identities < 1 or self.k_instances < 2:
            raise ConfigError(
                f"pk layout ({self.p_identities},{self.k_instances}) needs P>=1 and K>=2"
            )
        for name in ("class_weight", "triplet_weight", "ssl_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.class_weight == 0 and self.triplet_weight == 0 and self.ssl_weight == 0:
            raise ConfigError("at least one loss weight must be positive")
        if self.triplet_weight > 0 and self.p_identities < 2:
            raise ConfigError("triplet loss requires P >= 2 identities per batch")
        if not (0.0 <= self.label_smoothing <= 1.0):
            raise ConfigError(f"label_smoothing outside [0,1]: {self.label_smoothing}")
        if not (0.0 <= self.ema_momentum <= 1.0):
            raise ConfigError(f"ema_momentum outside [0,1]: {self.ema_momentum}")
        if self.optimizer not in ("adamw", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("step", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.base_lr <= 0 or self.min_lr < 0:
            raise ConfigError("learning rates must be positive")
        if list(self.milestones) != sorted(self.milestones):
            raise ConfigError(f"milestones must be sorted, got {self.milestones}")
        if self.warmup_epochs < 0 or not (0.0 < self.warmup_rate <= 1.0):
            raise ConfigError("invalid warmup settings")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        self.augment.validate()
        self.ssl.validate()

    def baseline(self) -> "TrainConfig":
        """The supervised-only configuration: no matching loss, no local views."""
        return dataclasses.replace(
            self, ssl_weight=0.0, augment=dataclasses.replace(self.augment, n_local=0)
        )


def learning_rate(iteration: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    """Scheduled learning rate at a global iteration.

    Linear warmup from warmup_rate*base_lr to base_lr over the first
    warmup_epochs, then step decay (gamma at each milestone epoch) or
    cosine decay down to min_lr at the final epoch.
    """
    if iteration < 0:
        raise ConfigError(f"iteration must be >= 0, got {iteration}")
    if steps_per_epoch < 1:
        raise ConfigError(f"steps_per_epoch must be >= 1, got {steps_per_epoch}")
    warm = cfg.warmup_epochs * steps_per_epoch
    if iteration < warm:
        return cfg.base_lr * (cfg.warmup_rate + (1.0 - cfg.warmup_rate) * iteration / warm)
    epoch = iteration // steps_per_epoch
    if cfg.lr_schedule == "step":
        n_decays = sum(1 for m in cfg.milestones if epoch >= m)
        return cfg.base_lr * cfg.gamma**n_decays
    total = cfg.epochs * steps_per_epoch
    if total <= warm:
        return cfg.min_lr
    progress = min(1.0, (iteration - warm) / (total - warm))
    return cfg.min_lr + 0.5 * (cfg.base_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


@dataclass(frozen=True)
class TrainRecord:
    iteration: int
    epoch: int
    loss_class: float
    loss_triplet: float
    loss_ssl: float
    loss_total: float
    lr: float
    teacher_temperature: float
    teacher_entropy: float


class TrainLog:
    """Append-only per-step records, serialized as a fixed-column CSV."""

    COLUMNS = ("iter", "epoch", "L_c", "L_t", "L_s", "L_total", "lr", "tau_t", "entropy_pt")

    def __init__(self):
        self.records: list[TrainRecord] = []

    def append(self, record: TrainRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(self.COLUMNS) + "\n")
            for r in self.records:
                row = (
                    str(r.iteration),
                    str(r.epoch),
                    repr(r.loss_class),
                    repr(r.loss_triplet),
                    repr(r.loss_ssl),
                    repr(r.loss_total),
                    repr(r.lr),
                    repr(r.teacher_temperature),
                    repr(r.teacher_entropy),
                )
                fh.write(",".join(row) + "\n")


class DistillBranch(nn.Module):
    """Encoder plus projection head; one instance per student/teacher side."""

    def __init__(self, encoder: nn.Module, projector: Projector):
        super().__init__()
        self.encoder = encoder
        self.projector = projector


def _stream(*entropy) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(entropy))))


def _child_seed(seed: int, tag: int) -> int:
    state = np.random.SeedSequence([seed, tag]).generate_state(1, dtype=np.uint64)[0]
    return int(state % (2**63))


def _stack(views) -> torch.Tensor:
    arr = np.stack([np.ascontiguousarray(v.transpose(2, 0, 1)) for v in views])
    return torch.from_numpy(arr)


def build_models(cfg: TrainConfig, n_classes: int):
    """Construct the student branch, its teacher copy, and the re-id head."""
    encoder = build_encoder(cfg.encoder, seed=_child_seed(cfg.seed, _ENCODER_SEED_TAG))
    projector = Projector(
        cfg.encoder.embed_dim,
        cfg.ssl.hidden_dim,
        cfg.ssl.projection_dim,
        seed=_child_seed(cfg.seed, _PROJECTOR_SEED_TAG),
    )
    student = DistillBranch(encoder, projector)
    pair = StudentTeacherPair(student, cfg.ema_momentum)
    head = ReIdHead(cfg.encoder.embed_dim, n_classes, seed=_child_seed(cfg.seed, _HEAD_SEED_TAG))
    return pair, head


class Trainer:
    """Owns all mutable training state; one logical training thread."""

    def __init__(self, cfg: TrainConfig, manifest: DatasetManifest, reference_mode: bool = True):
        cfg.validate()
        self.cfg = cfg
        self.reference_mode = reference_mode
        if reference_mode:
            torch.set_num_threads(1)

        entries = manifest.split_entries("train")
        if not entries:
            raise DataError("manifest has no train split")
        self.samples = load_samples(manifest, "train")
        self.n_classes = manifest.num_train_identities
        by_id: dict[int, list[int]] = {}
        for idx, sample in enumerate(self.samples):
            by_id.setdefault(sample.identity, []).append(idx)
        p, k = cfg.p_identities, cfg.k_instances
        self.eligible_ids = np.array(
            sorted(ident for ident, pos in by_id.items() if len(pos) >= k), dtype=np.int64
        )
        if len(self.eligible_ids) < p:
            raise DataError(
                f"need >= {p} train identities with >= {k} images, found {len(self.eligible_ids)}"
            )
        self.positions = {ident: np.array(pos, dtype=np.int64) for ident, pos in by_id.items()}
        self.steps_per_epoch = max(1, len(self.samples) // (p * k))

        self.pair, self.head = build_models(cfg, self.n_classes)
        self.center = Center(cfg.ssl.projection_dim, cfg.ssl.center_momentum)
        self.monitor = CollapseMonitor(cfg.ssl.projection_dim)
        self.temperatures = cfg.ssl.schedule()
        self.temperature_warmup_iterations = (
            cfg.ssl.temperature_warmup_epochs * self.steps_per_epoch
        )

        self._opt_params = list(self.student.parameters()) + list(self.head.parameters())
        opt_cls = torch.optim.AdamW if cfg.optimizer == "adamw" else torch.optim.Adam
        self.optimizer = opt_cls(
            self._opt_params, lr=cfg.base_lr, betas=(0.9, 0.999), weight_decay=cfg.weight_decay
        )
        self.iteration = 0
        self.epochs_done = 0

    @property
    def student(self) -> DistillBranch:
        return self.pair.student

    @property
    def teacher(self) -> DistillBranch:
        return self.pair.teacher

    def _sample_batch(self, rng: np.random.Generator) -> Batch:
        p, k = self.cfg.p_identities, self.cfg.k_instances
        ids = rng.choice(self.eligible_ids, size=p, replace=False)
        chosen: list[int] = []
        for ident in ids:
            chosen.extend(rng.choice(self.positions[int(ident)], size=k, replace=False).tolist())
        return Batch(tuple(self.samples[i] for i in chosen), (p, k))

    def train_step(self, batch: Batch) -> TrainRecord:
        """One optimization step; see the module docstring for routing."""
        cfg = self.cfg
        it = self.iteration
        epoch = it // self.steps_per_epoch
        lr = learning_rate(it, cfg, self.steps_per_epoch)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        tau_s = self.temperatures.student
        tau_t = self.temperatures.teacher_at(it, self.temperature_warmup_iterations)

        ssl_on = cfg.ssl_weight > 0.0
        cls_on = cfg.class_weight > 0.0
        tri_on = cfg.triplet_weight > 0.0

        bundles = [
            make_view_bundle(sample, cfg.augment, _stream(cfg.seed, _AUGMENT_STREAM, it, slot))
            for slot, sample in enumerate(batch.samples)
        ]
        labels = torch.from_numpy(batch.labels)
        n = len(bundles)

        self.student.train()
        self.head.train()

        if ssl_on:
            g_tensor = _stack([v for b in bundles for v in b.globals])
            feats_g = self.student.encoder(g_tensor)
            x = feats_g[0::2]  # re-id losses consume the first global view
        else:
            g_tensor = None
            feats_g = None
            x = self.student.encoder(_stack([b.globals[0] for b in bundles]))

        zero = torch.zeros((), dtype=x.dtype)
        loss_tri = triplet_loss(x, labels) if tri_on else zero
        if cls_on:
            logits = self.head(x)
            loss_cls = ce_loss(logits, labels, cfg.label_smoothing)
        else:
            loss_cls = zero

        entropy = 0.0
        if ssl_on:
            n_local = cfg.augment.n_local
            if n_local > 0:
                feats_l = self.student.encoder(_stack([v for b in bundles for v in b.locals]))
                feats_all = torch.cat([feats_g, feats_l], dim=0)
            else:
                feats_all = feats_g
            proj_all = self.student.projector(feats_all)
            e_dim = proj_all.shape[-1]
            student_proj = proj_all[: 2 * n].reshape(n, 2, e_dim)
            if n_local > 0:
                local_proj = proj_all[2 * n :].reshape(n, n_local, e_dim)
                student_proj = torch.cat([student_proj, local_proj], dim=1)
            with torch.no_grad():
                t_proj = self.teacher.projector(self.teacher.encoder(g_tensor))
            gt = t_proj.reshape(n, 2, e_dim)
            if cfg.ssl.loss_kind == "rmse":
                loss_ssl = multiview_rmse(student_proj, gt)
            else:
                loss_ssl = multiview_cross_entropy(student_proj, gt, self.center, tau_s, tau_t)
            pt_rows = teacher_probs(t_proj, self.center, tau_t)
            self.monitor.observe(pt_rows)
            entropy = self.monitor.last_entropy
        else:
            t_proj = None
            loss_ssl = zero

        total = (
            cfg.class_weight * loss_cls
            + cfg.triplet_weight * loss_tri
            + cfg.ssl_weight * loss_ssl
        )
        if not bool(torch.isfinite(total)):
            raise NonFiniteLossError(
                f"non-finite loss at iteration {it}: "
                f"L_c={float(loss_cls.detach())}, L_t={float(loss_tri.detach())}, "
                f"L_s={float(loss_ssl.detach())}, lr={lr}"
            )

        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()
        self.pair.ema_update()
        if ssl_on and cfg.ssl.center_enabled:
            self.center.update(t_proj)

        self.iteration += 1
        l_c = float(loss_cls.detach())
        l_t = float(loss_tri.detach())
        l_s = float(loss_ssl.detach())
        # logged total recomputed from logged components so the weighted-sum
        # identity holds exactly on the log
        return TrainRecord(
            iteration=it,
            epoch=epoch,
            loss_class=l_c,
            loss_triplet=l_t,
            loss_ssl=l_s,
            loss_total=cfg.class_weight * l_c + cfg.triplet_weight * l_t + cfg.ssl_weight * l_s,
            lr=lr,
            teacher_temperature=tau_t,
            teacher_entropy=entropy,
        )

    def run(self, out_dir=None, log: TrainLog | None = None) -> TrainLog:
        """Train until cfg.epochs; write the log and checkpoints under out_dir."""
        log = log if log is not None else TrainLog()
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        _profiler.mark_training_active()
        try:
            while self.epochs_done < self.cfg.epochs:
                rng = _stream(self.cfg.seed, _SAMPLER_STREAM, self.epochs_done)
                for _ in range(self.steps_per_epoch):
                    log.append(self.train_step(self._sample_batch(rng)))
                self.epochs_done += 1
                every = self.cfg.checkpoint_every
                if (
                    out is not None
                    and every > 0
                    and self.epochs_done % every == 0
                    and self.epochs_done < self.cfg.epochs
                ):
                    save_checkpoint(self, out / f"checkpoint_epoch_{self.epochs_done:03d}.npz")
        finally:
            _profiler.mark_training_idle()
        if out is not None:
            save_checkpoint(self, out / "checkpoint.npz")
            log.to_csv(out / "trainlog.csv")
        return log

    @classmethod
    def from_checkpoint(cls, path, manifest: DatasetManifest, reference_mode: bool = True):
        """Rebuild a trainer from a checkpoint for exact resumption."""
        loaded = load_checkpoint(path)
        trainer = cls(loaded.config, manifest, reference_mode)
        if trainer.n_classes != loaded.meta["n_classes"]:
            raise DataError(
                f"checkpoint was trained with {loaded.meta['n_classes']} classes, "
                f"manifest has {trainer.n_classes}"
            )
        trainer.student.load_state_dict(loaded.student_state)
        trainer.teacher.load_state_dict(loaded.teacher_state)
        trainer.head.load_state_dict(loaded.head_state)
        trainer.center.value = loaded.center.clone()
        trainer.monitor.load_state(loaded.meta["monitor"])
        trainer.iteration = loaded.meta["iteration"]
        trainer.epochs_done = loaded.meta["epochs_done"]
        for idx, param in enumerate(trainer._opt_params):
            state = loaded.optimizer_state.get(idx)
            if state is not None:
                trainer.optimizer.state[param] = {
                    "step": torch.from_numpy(np.array(state["step"])).clone(),
                    "exp_avg": torch.from_numpy(state["exp_avg"]).clone(),
                    "exp_avg_sq": torch.from_numpy(state["exp_avg_sq"]).clone(),
                }
        return trainer


def run_training(
    cfg: TrainConfig | None,
    manifest: DatasetManifest,
    out_dir=None,
    resume_from=None,
    reference_mode: bool = True,
):
    """Train from scratch or resume; returns (trainer, log).

    Resumption always uses the checkpoint's embedded config (resuming
    across changed configs is unsupported); a cfg passed alongside
    resume_from must match it.
    """
    if resume_from is not None:
        trainer = Trainer.from_checkpoint(resume_from, manifest, reference_mode)
        if cfg is not None and config_to_dict(cfg) != config_to_dict(trainer.cfg):
            raise ConfigError("config passed with resume_from differs from the checkpoint's")
    else:
        if cfg is None:
            raise ConfigError("cfg is required when not resuming")
        trainer = Trainer(cfg, manifest, reference_mode)
    log = trainer.run(out_dir=out_dir)
    return trainer, log


# --- checkpoint container: uncompressed zip of .npy members ------------
# Written with fixed timestamps so identical state yields identical bytes;
# readable with numpy.load like any .npz archive.


def write_named_arrays(path, arrays: dict) -> None:
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(arr), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def read_named_arrays(path) -> dict:
    out = {}
    with zipfile.ZipFile(path, "r") as zf:
        for name in zf.namelist():
            with zf.open(name) as fh:
                out[name[: -len(".npy")]] = np.lib.format.read_array(fh, allow_pickle=False)
    return out


def _tensor_to_array(value) -> np.ndarray:
    if torch.is_tensor(value):
        return value.detach().cpu().numpy()
    return np.asarray(value)


def save_checkpoint(trainer: Trainer, path) -> None:
    """Write all state needed for exact resumption and for evaluation."""
    arrays: dict[str, np.ndarray] = {}
    meta = {
        "format": CHECKPOINT_FORMAT,
        "iteration": trainer.iteration,
        "epochs_done": trainer.epochs_done,
        "n_classes": trainer.n_classes,
        "monitor": trainer.monitor.state(),
        "config": config_to_dict(trainer.cfg),
    }
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    for key, value in trainer.student.state_dict().items():
        arrays[f"student/{key}"] = _tensor_to_array(value)
    for key, value in trainer.teacher.state_dict().items():
        arrays[f"teacher/{key}"] = _tensor_to_array(value)
    for key, value in trainer.head.state_dict().items():
        arrays[f"head/{key}"] = _tensor_to_array(value)
    arrays["center"] = _tensor_to_array(trainer.center.value)
    for idx, param in enumerate(trainer._opt_params):
        state = trainer.optimizer.state.get(param)
        if state:
            arrays[f"opt/{idx}/step"] = _tensor_to_array(state["step"])
            arrays[f"opt/{idx}/exp_avg"] = _tensor_to_array(state["exp_avg"])
            arrays[f"opt/{idx}/exp_avg_sq"] = _tensor_to_array(state["exp_avg_sq"])
    write_named_arrays(path, arrays)


@dataclass
class LoadedCheckpoint:
    config: TrainConfig
    meta: dict
    student: DistillBranch
    teacher: DistillBranch
    head: ReIdHead
    center_obj: Center
    student_state: dict
    teacher_state: dict
    head_state: dict
    center: torch.Tensor
    optimizer_state: dict


def load_checkpoint(path) -> LoadedCheckpoint:
    """Read a checkpoint and rebuild ready-to-use models from it."""
    if not os.path.isfile(path):
        raise DataError(f"checkpoint not found: {path}")
    arrays = read_named_arrays(path)
    if "meta" not in arrays:
        raise DataError(f"not a checkpoint (no meta entry): {path}")
    meta = json.loads(str(arrays["meta"]))
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"unsupported checkpoint format: {meta.get('format')!r}")
    cfg = config_from_dict(TrainConfig, meta["config"])
    pair, head = build_models(cfg, meta["n_classes"])

    def _collect(prefix: str) -> dict:
        return {
            key[len(prefix) :]: torch.from_numpy(np.array(arr))
            for key, arr in arrays.items()
            if key.startswith(prefix)
        }

    student_state = _collect("student/")
    teacher_state = _collect("teacher/")
    head_state = _collect("head/")
    pair.student.load_state_dict(student_state)
    pair.teacher.load_state_dict(teacher_state)
    head.load_state_dict(head_state)
    pair.teacher.eval()
    center_obj = Center(cfg.ssl.projection_dim, cfg.ssl.center_momentum)
    center = torch.from_numpy(np.array(arrays["center"]))
    center_obj.value = center.clone()

    optimizer_state: dict[int, dict] = {}
    for key, arr in arrays.items():
        if key.startswith("opt/"):
            _, idx, kind = key.split("/")
            optimizer_state.setdefault(int(idx), {})[kind] = np.array(arr)

    return LoadedCheckpoint(
        config=cfg,
        meta=meta,
        student=pair.student,
        teacher=pair.teacher,
        head=head,
        center_obj=center_obj,
        student_state=student_state,
        teacher_state=teacher_state,
        head_state=head_state,
        center=center,
        optimizer_state=optimizer_state,
    )
