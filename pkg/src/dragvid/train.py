"""Training loop: Adam over the diffusion objective with EMA tracking."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .denoiser import DenoiserConfig, DenoiserState, ema_update, save_checkpoint
from .diffusion import NoiseSchedule, training_loss
from .toyworld import DatasetSample, list_samples, load_sample
from .types import RunConfig, ValidationError


@dataclass
class TrainResult:
    steps: int
    final_loss: float
    mean_loss_last_100: float
    checkpoint_path: str | None
    state: "DenoiserState"


def make_schedule(config: RunConfig) -> NoiseSchedule:
    if config.schedule == "cosine":
        return NoiseSchedule.cosine(config.diffusion_steps)
    return NoiseSchedule.continuous()


def _to_batch(samples: list[DatasetSample], idx: np.ndarray):
    videos = torch.stack(
        [
            torch.as_tensor(samples[i].video.frames).permute(0, 3, 1, 2)
            for i in idx
        ]
    )
    refs = videos[:, 0]
    drag_sets = [samples[i].drags for i in idx]
    return videos, refs, drag_sets


def load_dataset(data_dir, config: RunConfig) -> list[DatasetSample]:
    ids = list_samples(data_dir)
    if not ids:
        raise ValidationError(f"dataset at {data_dir} lists no samples")
    samples = [load_sample(data_dir, sid) for sid in ids]
    for s in samples:
        if s.video.frame_count != config.frame_count:
            raise ValidationError(
                f"sample {s.sample_id} has {s.video.frame_count} frames, "
                f"config expects {config.frame_count}"
            )
        if (s.video.resolution.height, s.video.resolution.width) != (
            config.height,
            config.width,
        ):
            raise ValidationError(f"sample {s.sample_id} resolution does not match config")
    return samples


def train(
    config: RunConfig,
    data_dir,
    max_steps: int,
    checkpoint_path=None,
    log_path=None,
    state: DenoiserState | None = None,
    log_every: int = 1,
) -> TrainResult:
    """Run ``max_steps`` optimizer steps; returns the final and recent loss.

    Deterministic given the config seed: batch selection, noise draws and
    CFG drops all come from one seeded generator.
    """
    samples = load_dataset(data_dir, config)
    schedule = make_schedule(config)
    if state is None:
        state = DenoiserState.create(DenoiserConfig.from_run_config(config), seed=config.seed)
    optimizer = torch.optim.Adam(state.model.parameters(), lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)

    log_file = open(log_path, "w") if log_path else None
    losses: list[float] = []
    started = time.time()
    try:
        for step in range(1, max_steps + 1):
            idx = rng.integers(0, len(samples), size=config.batch_size)
            batch = _to_batch(samples, idx)
            loss = training_loss(
                batch, state, schedule, rng, drop_prob=config.cfg_drop_prob
            )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            ema_update(state, config.ema_decay)
            value = float(loss.detach())
            losses.append(value)
            if log_file and step % log_every == 0:
                log_file.write(
                    json.dumps(
                        {"step": step, "loss": value, "elapsed_s": time.time() - started}
                    )
                    + "\n"
                )
                log_file.flush()
    finally:
        if log_file:
            log_file.close()

    if checkpoint_path is not None:
        Path(checkpoint_path).parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(state, checkpoint_path)
    return TrainResult(
        steps=max_steps,
        final_loss=losses[-1] if losses else float("nan"),
        mean_loss_last_100=float(np.mean(losses[-100:])) if losses else float("nan"),
        checkpoint_path=str(checkpoint_path) if checkpoint_path else None,
        state=state,
    )
