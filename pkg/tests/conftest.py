import numpy as np
import pytest
import torch

from ssbver.augment import AugmentConfig
from ssbver.backbone import EncoderConfig
from ssbver.ssl_head import SslConfig
from ssbver.synthetic import SyntheticSpec, generate_synthetic
from ssbver.trainer import TrainConfig, Trainer

torch.set_num_threads(1)


def small_train_config(**overrides) -> TrainConfig:
    """Desk-scale config small enough for sub-second training steps."""
    base = dict(
        seed=11,
        epochs=2,
        p_identities=2,
        k_instances=2,
        encoder=EncoderConfig(embed_dim=32, widths=(8, 16, 32)),
        augment=AugmentConfig(global_size=64, local_size=32, n_local=2),
        ssl=SslConfig(projection_dim=64, hidden_dim=128),
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory):
    """8 identities x 8 images at 64x64; per identity 5 train, 1 query, 2 gallery."""
    out = tmp_path_factory.mktemp("toy_dataset")
    spec = SyntheticSpec(
        n_identities=8,
        images_per_identity=8,
        image_size=(64, 64),
        n_cameras=3,
        seed=7,
        query_per_identity=1,
        gallery_per_identity=2,
    )
    return generate_synthetic(spec, str(out))


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory, toy_manifest):
    """A short but real training run; yields (out_dir, trainer, log)."""
    out = tmp_path_factory.mktemp("trained_run")
    cfg = small_train_config()
    trainer = Trainer(cfg, toy_manifest)
    log = trainer.run(out_dir=out)
    return out, trainer, log


def make_pixels(height=32, width=32, value=0.5, seed=None):
    if seed is None:
        return np.full((height, width, 3), value, dtype=np.float32)
    rng = np.random.default_rng(seed)
    return rng.random((height, width, 3), dtype=np.float32)
