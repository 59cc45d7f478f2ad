import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pixelfill.data import make_synthetic_image, write_synthetic_corpus  # noqa: E402
from pixelfill.trainer import TrainConfig, create_trainer  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_images():
    """Eight deterministic 64x64 synthetic images."""
    return [make_synthetic_image(64, np.random.default_rng([9, i])) for i in range(8)]


@pytest.fixture
def tiny_config():
    """Smallest useful training configuration for fast tests."""
    return TrainConfig(
        task="center",
        image_size=64,
        region_size=32,
        overlap=2,
        base_filters=8,
        disc_filters=4,
        batch_size=2,
        max_steps=4,
        augment=False,
        log_every=2,
        checkpoint_every=0,
        seed=7,
    )


@pytest.fixture
def tiny_trainer(tiny_config, small_images):
    return create_trainer(tiny_config, small_images)


@pytest.fixture
def corpus_dir(tmp_path):
    """A 10-image on-disk ppm corpus with a manifest."""
    manifest = write_synthetic_corpus(tmp_path / "corpus", count=10, size=64, seed=11)
    return manifest
