"""Shared domain types, coordinate conventions, and run configuration.

Coordinates are 0-based and row-major: a pixel is addressed as ``(h, w)``
with ``h`` in ``{0..H-1}`` and ``w`` in ``{0..W-1}``.  Pixel values live in
``[-1, 1]``.  All types here are immutable value objects and safe to share
across workers.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DEFAULT_K_MAX = 5

Coord = tuple[int, int]


class ValidationError(ValueError):
    """A domain object violates one of its invariants."""


@dataclass(frozen=True)
class Resolution:
    """Video resolution in pixels, height first."""

    height: int
    width: int

    def __post_init__(self) -> None:
        if self.height < 8 or self.width < 8:
            raise ValidationError(
                f"resolution must be at least 8x8, got {self.height}x{self.width}"
            )

    def contains(self, point: Coord) -> bool:
        h, w = point
        return 0 <= h < self.height and 0 <= w < self.width


@dataclass(frozen=True)
class Drag:
    """A tracked point: origin pixel plus its per-frame trajectory.

    ``trajectory[0]`` must equal ``origin``; the trajectory has one entry per
    video frame.
    """

    origin: Coord
    trajectory: tuple[Coord, ...]

    @staticmethod
    def from_points(points: Iterable[Sequence[int]]) -> "Drag":
        traj = tuple((int(p[0]), int(p[1])) for p in points)
        if not traj:
            raise ValidationError("drag trajectory may not be empty")
        return Drag(origin=traj[0], trajectory=traj)

    @property
    def frame_count(self) -> int:
        return len(self.trajectory)

    @property
    def terminus(self) -> Coord:
        return self.trajectory[-1]

    def as_array(self) -> np.ndarray:
        """Trajectory as an (N, 2) int array of (h, w) rows."""
        return np.asarray(self.trajectory, dtype=np.int64)


@dataclass(frozen=True)
class DragSet:
    """Up to ``k_max`` drags sharing one frame count and resolution."""

    drags: tuple[Drag, ...] = ()
    k_max: int = DEFAULT_K_MAX

    @staticmethod
    def of(drags: Iterable[Drag], k_max: int = DEFAULT_K_MAX) -> "DragSet":
        return DragSet(drags=tuple(drags), k_max=k_max)

    @property
    def count(self) -> int:
        return len(self.drags)

    def __iter__(self):
        return iter(self.drags)

    def __len__(self) -> int:
        return len(self.drags)


@dataclass(frozen=True)
class Video:
    """Dense N x H x W x C pixel array in [-1, 1]; frame 0 is the reference."""

    frames: np.ndarray

    def __post_init__(self) -> None:
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 4:
            raise ValidationError(f"video frames must be N x H x W x C, got shape {frames.shape}")
        if not np.isfinite(frames).all():
            raise ValidationError("video contains non-finite values")
        object.__setattr__(self, "frames", frames)

    @property
    def frame_count(self) -> int:
        return int(self.frames.shape[0])

    @property
    def resolution(self) -> Resolution:
        return Resolution(int(self.frames.shape[1]), int(self.frames.shape[2]))

    @property
    def channels(self) -> int:
        return int(self.frames.shape[3])

    @property
    def reference(self) -> np.ndarray:
        return self.frames[0]


def validate_drag_set(drags: DragSet, res: Resolution, n: int) -> DragSet:
    """Check every DragSet invariant, returning the set unchanged if valid.

    Errors name the offending drag index.  Validating an already validated
    set is a no-op (idempotent).
    """
    if drags.count > drags.k_max:
        raise ValidationError(
            f"drag set has K={drags.count} drags, exceeding capacity K_max={drags.k_max}"
        )
    for i, drag in enumerate(drags):
        if drag.frame_count != n:
            raise ValidationError(
                f"drag {i}: trajectory has {drag.frame_count} points, expected {n} frames"
            )
        if drag.trajectory[0] != drag.origin:
            raise ValidationError(
                f"drag {i}: first trajectory point {drag.trajectory[0]} "
                f"differs from origin {drag.origin}"
            )
        for t, point in enumerate(drag.trajectory):
            if not res.contains(point):
                raise ValidationError(
                    f"drag {i}: point {point} at frame {t} is outside "
                    f"{res.height}x{res.width}"
                )
    return drags


_SCHEDULES = ("cosine", "continuous")
_ATTENTION_MODES = ("all_to_first", "per_frame")


@dataclass(frozen=True)
class RunConfig:
    """Every knob of the pipeline, serializable to/from a flat JSON document.

    Defaults follow the training recipe: CFG drop 0.1, EMA decay 0.9999,
    maximum guidance 5.0, 50 sampler steps.  The toy resolution is 64x64
    with 8 frames.
    """

    height: int = 64
    width: int = 64
    frame_count: int = 8
    channels: int = 3
    level_widths: tuple[int, ...] = (64, 128, 256)
    blocks_per_level: int = 2
    heads: int = 4
    k_max: int = DEFAULT_K_MAX
    diffusion_steps: int = 1000
    sampler_steps: int = 50
    guidance_max: float = 5.0
    guidance_min: float = 1.0
    cfg_drop_prob: float = 0.1
    ema_decay: float = 0.9999
    schedule: str = "cosine"
    spatial_attention: str = "all_to_first"
    batch_size: int = 8
    learning_rate: float = 2e-4
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "level_widths", tuple(int(w) for w in self.level_widths))
        Resolution(self.height, self.width)  # bounds check
        if self.frame_count < 2:
            raise ValidationError("frame_count must be at least 2")
        if self.channels < 1:
            raise ValidationError("channels must be positive")
        if not self.level_widths:
            raise ValidationError("level_widths may not be empty")
        if any(b <= 0 for b in self.level_widths):
            raise ValidationError("level widths must be positive")
        if list(self.level_widths) != sorted(self.level_widths):
            raise ValidationError("level widths must be nondecreasing with depth")
        if self.blocks_per_level < 1:
            raise ValidationError("blocks_per_level must be at least 1")
        if self.heads < 1:
            raise ValidationError("heads must be at least 1")
        if self.k_max < 1:
            raise ValidationError("k_max must be at least 1")
        if self.diffusion_steps < 1:
            raise ValidationError("diffusion_steps must be at least 1")
        if self.sampler_steps < 1:
            raise ValidationError("sampler_steps must be at least 1")
        if self.guidance_max < self.guidance_min:
            raise ValidationError("guidance_max must be >= guidance_min")
        if not 0.0 <= self.cfg_drop_prob <= 1.0:
            raise ValidationError("cfg_drop_prob must lie in [0, 1]")
        if not 0.0 < self.ema_decay < 1.0:
            raise ValidationError("ema_decay must lie in (0, 1)")
        if self.schedule not in _SCHEDULES:
            raise ValidationError(f"schedule must be one of {_SCHEDULES}")
        if self.spatial_attention not in _ATTENTION_MODES:
            raise ValidationError(f"spatial_attention must be one of {_ATTENTION_MODES}")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be at least 1")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        # The denoiser halves the resolution once per level below the first.
        down = 2 ** (len(self.level_widths) - 1)
        if self.height % down or self.width % down:
            raise ValidationError(
                f"resolution {self.height}x{self.width} is not divisible by the "
                f"{down}x downsampling of {len(self.level_widths)} levels"
            )

    @property
    def resolution(self) -> Resolution:
        return Resolution(self.height, self.width)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["level_widths"] = list(self.level_widths)
        return d

    @staticmethod
    def from_dict(data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return RunConfig(**data)

    def to_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @staticmethod
    def from_json(path) -> "RunConfig":
        with open(path) as f:
            return RunConfig.from_dict(json.load(f))
