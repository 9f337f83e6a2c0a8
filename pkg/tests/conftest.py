import numpy as np
import pytest
import torch

from dragvid.denoiser import DenoiserConfig, DenoiserState
from dragvid.toyworld import write_dataset
from dragvid.types import Drag, DragSet, Resolution, RunConfig


TINY_RUN = RunConfig(
    height=32,
    width=32,
    frame_count=4,
    level_widths=(8, 16),
    blocks_per_level=1,
    heads=1,
    batch_size=2,
    ema_decay=0.9,
    sampler_steps=2,
    learning_rate=1e-3,
    seed=11,
)


@pytest.fixture(scope="session")
def tiny_config() -> RunConfig:
    return TINY_RUN


@pytest.fixture(scope="session")
def tiny_state(tiny_config) -> DenoiserState:
    torch.manual_seed(7)
    return DenoiserState.create(DenoiserConfig.from_run_config(tiny_config), seed=7)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_config):
    root = tmp_path_factory.mktemp("dataset")
    manifest = write_dataset(root, tiny_config, num_scenes=4)
    return root, manifest


def random_drag(rng: np.random.Generator, res: Resolution, n: int) -> Drag:
    points = np.stack(
        [
            rng.integers(0, res.height, size=n),
            rng.integers(0, res.width, size=n),
        ],
        axis=1,
    )
    return Drag.from_points(points)


def random_drag_set(
    rng: np.random.Generator, res: Resolution, n: int, k: int, k_max: int = 5
) -> DragSet:
    return DragSet.of([random_drag(rng, res, n) for _ in range(k)], k_max=k_max)
