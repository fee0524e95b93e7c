"""Shared tiny-scale configs and datasets."""

import numpy as np
import pytest

from src.config import DatasetConfig, EvalConfig, ModelConfig, RunConfig, TrainConfig
from src.constants import QueryMode
from src.data import generate_dataset


def tiny_model(mode: QueryMode | str = QueryMode.PAQ, seed: int = 0, **overrides) -> ModelConfig:
    fields = dict(
        image_size=16,
        patch_size=4,
        embed_dim=8,
        num_queries=4,
        num_patterns=3,
        num_layers=2,
        num_heads=2,
        num_classes=6,
        ffn_hidden=16,
        wgen_hidden=8,
        mode=QueryMode(mode),
        seed=seed,
    )
    fields.update(overrides)
    return ModelConfig(**fields)


def tiny_run(mode: QueryMode | str = QueryMode.PAQ, seed: int = 0, **train_overrides) -> RunConfig:
    train_fields = dict(epochs=2, batch_size=2, lr=1e-3, mode=QueryMode(mode), seed=seed)
    train_fields.update(train_overrides)
    return RunConfig(
        model=tiny_model(mode, seed),
        train=TrainConfig(**train_fields),
        data=DatasetConfig(
            train_images=4, val_images=2, test_images=2, image_size=16, max_objects=3, seed=seed
        ),
        eval=EvalConfig(max_detections=4),
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(params=[QueryMode.BASELINE, QueryMode.PAQ], ids=str)
def mode(request) -> QueryMode:
    return request.param


@pytest.fixture
def tiny_dataset():
    return generate_dataset(tiny_run().data)
