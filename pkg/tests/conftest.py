"""
Test configuration and fixtures for the SpotIQ test suite.
"""

import os
import sys
import tempfile
from pathlib import Path

import numpy as np
import pytest
import torch
from loguru import logger

from src.data_synth import generate_dataset, save_dataset
from src.models import (
    BackboneSpec,
    EvalSpec,
    LossConfig,
    OptimConfig,
    SyntheticDatasetSpec,
    TemporalBlockSpec,
    TrainConfig,
    VideoRecord,
)


@pytest.fixture
def temp_dir():
    """Create a temporary directory for test files."""
    with tempfile.TemporaryDirectory() as tmp_dir:
        yield Path(tmp_dir)


@pytest.fixture
def tiny_dataset_spec():
    """Small, fast dataset: 12 videos of 64 frames at 16x16."""
    return SyntheticDatasetSpec(
        num_videos=12,
        frames_per_video=64,
        height=16,
        width=16,
        num_classes=3,
        class_rates=[3.0, 2.0, 1.0],
        min_event_gap=6,
        seed=7,
    )


@pytest.fixture
def tiny_backbone_spec():
    """One-stage backbone with a single ASTRM bottleneck."""
    return BackboneSpec(
        stem_width=4,
        stem_stride=2,
        stage_widths=[8],
        blocks_per_stage=[1],
        stage_strides=[2],
        astrm_kernel_size=3,
        astrm_temporal_ratio=2,
        astrm_hidden_ratio=2,
    )


@pytest.fixture
def tiny_train_config(tiny_dataset_spec, tiny_backbone_spec):
    """Two-epoch configuration on the tiny dataset."""
    return TrainConfig(
        dataset=tiny_dataset_spec,
        backbone=tiny_backbone_spec,
        temporal=TemporalBlockSpec(kind="bigru"),
        loss=LossConfig(embedding_dim=16, bank_size=12, lambda_sic=0.1, contrastive_warmup_epochs=1),
        optim=OptimConfig(lr=1e-3, warmup_epochs=1, rho=0.05),
        eval=EvalSpec(deltas=[0, 1, 2], ranges={"tight": [1, 2]}, nms_window=6),
        clip_len=16,
        clips_per_video=2,
        batch_size=4,
        eval_batch_size=2,
        epochs=2,
        seed=3,
    )


@pytest.fixture
def tiny_dataset_dir(temp_dir, tiny_dataset_spec):
    """Tiny dataset saved to disk."""
    data_dir = temp_dir / "data"
    save_dataset(generate_dataset(tiny_dataset_spec), data_dir, tiny_dataset_spec)
    return data_dir


@pytest.fixture
def single_event_record():
    """40-frame video with one class-1 event at frame 10."""
    frames = np.zeros((3, 40, 8, 8), dtype=np.float32)
    return VideoRecord(video_id="video_single", frames=frames, events=[(10, 1)], num_classes=3)


@pytest.fixture
def double_precision():
    """Run a test with float64 as the default dtype."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


@pytest.fixture
def test_env():
    """Temporarily set SpotIQ environment variables."""
    values = {
        "SPOTIQ_DEVICE": "cpu",
        "SPOTIQ_LOG_LEVEL": "DEBUG",
        "SPOTIQ_NUM_THREADS": "2",
    }
    original = {key: os.environ.get(key) for key in values}
    os.environ.update(values)

    yield values

    for key, value in original.items():
        if value is None:
            os.environ.pop(key, None)
        else:
            os.environ[key] = value


@pytest.fixture
def trained_run(temp_dir, tiny_train_config, tiny_dataset_dir):
    """Run directory of a finished two-epoch training on the tiny dataset."""
    from src.trainer import run_training

    run_dir = temp_dir / "run"
    run_training(tiny_train_config, tiny_dataset_dir, run_dir, device="cpu")
    return run_dir


@pytest.fixture
def isolated_log_file(temp_dir, monkeypatch):
    """Point the CLI file sink into the temporary directory."""
    from src.config import settings

    log_file = temp_dir / "logs" / "spotiq.log"
    monkeypatch.setattr(settings, "log_file", str(log_file))
    yield log_file
    logger.remove()
    logger.add(sys.stderr)
