"""
Pytest configuration for LightTBNet tests.

Logs go to a throwaway directory so test runs never touch the user's
config folder. The fixtures provide a small model that runs in a fraction
of a second and synthetic cohorts for the data, training and CLI tests.
"""

import os
import tempfile

os.environ.setdefault("LIGHTTBNET_LOG_DIR", tempfile.mkdtemp(prefix="lighttbnet-logs-"))

import numpy as np
import pytest

from lighttbnet.core.checkpoint import Checkpoint, fold_checkpoint_path, save_checkpoint
from lighttbnet.core.imaging import PreprocessConfig, save_gray_png
from lighttbnet.core.model import ModelConfig, build
from lighttbnet.core.tensor import precision


@pytest.fixture
def float64():
    """Run the test body with 64-bit tensors."""
    with precision(np.float64):
        yield


@pytest.fixture
def tiny_config():
    """Two narrow blocks on 32x32 inputs."""
    return ModelConfig(n_blocks=2, channel_plan=(2, 2), reduce_channels=2, fc_hidden=4, input_size=32, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def gray_image(rng):
    """A 40x48 uint8 image with some structure."""
    yy, xx = np.mgrid[0:40, 0:48]
    base = 100 + 60 * np.sin(xx / 7.0) * np.cos(yy / 5.0)
    return np.clip(base + rng.normal(0, 8, size=base.shape), 0, 255).astype(np.uint8)


@pytest.fixture
def ensemble_dir(tmp_path, tiny_config):
    """Five identical tiny fold checkpoints that record 32x32 preprocessing."""
    model = build(tiny_config)
    directory = tmp_path / "checkpoints"
    for k in range(5):
        checkpoint = Checkpoint.from_model(model, fold_id=k, epoch=1, val_auc=0.5 + 0.1 * k,
                                           preprocess=PreprocessConfig(image_size=32).to_dict())
        save_checkpoint(checkpoint, fold_checkpoint_path(directory, k))
    return directory


@pytest.fixture
def cxr_png(tmp_path, gray_image):
    path = tmp_path / "cxr.png"
    save_gray_png(gray_image, path)
    return path
