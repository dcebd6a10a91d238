"""Hybrid re-identification training with self-distillation, plus the
retrieval evaluation, analysis and profiling tools around it."""

from .augment import AugmentConfig, ViewBundle, make_global_views, make_local_views, make_view_bundle
from .backbone import EncoderConfig, StudentTeacherPair, TinyEncoder, ema_update, tiny_encoder
from .datamodel import Batch, EmbeddingMatrix, ImageSample, validate_batch
from .dataio import DatasetManifest, load_manifest, load_samples
from .reid_head import BottleneckNorm, ReIdHead, ce_loss, smooth_targets, triplet_loss
from .ssl_head import (
    Center,
    CollapseMonitor,
    Projector,
    SslConfig,
    TemperatureSchedule,
    dino_loss,
    rmse_loss,
    student_probs,
    teacher_probs,
    update_center,
)
from .synthetic import SyntheticSpec, generate_synthetic
from .trainer import TrainConfig, Trainer, TrainLog, learning_rate, run_training
from .evaluation import (
    DistanceReport,
    average_precision,
    cmc,
    distance_report,
    evaluate_retrieval,
    extract_embeddings,
    mean_ap,
    saliency_pair,
)
from .profiler import EfficiencyReport, count_params, measure_latency, profile_encoder

__version__ = "0.1.0"
