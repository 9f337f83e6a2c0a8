"""Animation curation: motion metrics, filtering, realism review, drag
sampling, and drag dedup.

A motion clip is a sequence of aligned 3-D point clouds with persistent
point identities.  Clips are scored by simple motion statistics, filtered
by a random forest trained on labeled examples, optionally reviewed by a
pluggable multimodal service (deterministic mock by default), and finally
augmented with drags sampled proportionally to point displacement and
projected to pixels.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import requests

from .forest import RandomForest
from .types import Drag, DragSet, Resolution, ValidationError, validate_drag_set

REVIEW_TOKEN_ENV = "DRAGVID_REVIEW_TOKEN"

REVIEW_SYSTEM_PROMPT = """You are a 3D artist, and now you are being shown some animation videos depicting an animated 3D asset. You are asked to filter out some animations.

You should filter out the animations that:

1) have trivial or no motion, i.e., the object is simply scaling, rotating, or moving as a whole without part-level dynamics;

or 2) depict a scene and only a small component in the scene is moving;

or 3) have motion that is imaginary, i.e., the motion is not the usual way of how the object moves and it's hard for humans to anticipate;

or 4) have very large global motion so that the object exits the frame partially or fully in one of the frames;

or 5) have changes in object color that are not due to lighting changes;

or 6) have motion that causes different parts of the same object to disconnect, overlap in an unnatural way, or disappear;

or 7) have motion that is very chaotic, for example objects exploding or bursting apart."""

REVIEW_USER_PROMPT = (
    "For the following animation (as frames of a video), frame1, frame2, frame3, "
    "frame4, tell me, in a single word 'Yes' or 'No', whether the video should be "
    "filtered out or not."
)


# ---------------------------------------------------------------------------
# Cameras


@dataclass(frozen=True)
class OrthographicCamera:
    """Maps world (x, y) onto the viewport; z is depth (smaller = closer)."""

    x_min: float = 0.0
    x_max: float = 1.0
    y_min: float = 0.0
    y_max: float = 1.0

    def project(self, points: np.ndarray, res: Resolution) -> tuple[np.ndarray, np.ndarray]:
        pts = np.atleast_2d(points)
        w = (pts[:, 0] - self.x_min) / (self.x_max - self.x_min) * res.width
        h = (pts[:, 1] - self.y_min) / (self.y_max - self.y_min) * res.height
        return np.stack([h, w], axis=1), pts[:, 2].copy()

    def to_dict(self) -> dict:
        return {
            "type": "orthographic",
            "x_min": self.x_min,
            "x_max": self.x_max,
            "y_min": self.y_min,
            "y_max": self.y_max,
        }


@dataclass(frozen=True)
class PinholeCamera:
    """Intrinsics (fx, fy, cx, cy) with a world-to-camera rigid transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: tuple = ((1, 0, 0), (0, 1, 0), (0, 0, 1))
    translation: tuple = (0.0, 0.0, 0.0)

    def project(self, points: np.ndarray, res: Resolution) -> tuple[np.ndarray, np.ndarray]:
        del res
        pts = np.atleast_2d(points)
        rot = np.asarray(self.rotation, dtype=float)
        cam = pts @ rot.T + np.asarray(self.translation)
        z = np.maximum(cam[:, 2], 1e-9)
        w = self.fx * cam[:, 0] / z + self.cx
        h = self.fy * cam[:, 1] / z + self.cy
        return np.stack([h, w], axis=1), cam[:, 2].copy()

    def to_dict(self) -> dict:
        return {
            "type": "pinhole",
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "rotation": [list(r) for r in self.rotation],
            "translation": list(self.translation),
        }


Camera = OrthographicCamera | PinholeCamera


def camera_from_dict(d: dict) -> Camera:
    kind = d.get("type")
    if kind == "orthographic":
        return OrthographicCamera(
            x_min=d.get("x_min", 0.0),
            x_max=d.get("x_max", 1.0),
            y_min=d.get("y_min", 0.0),
            y_max=d.get("y_max", 1.0),
        )
    if kind == "pinhole":
        return PinholeCamera(
            fx=d["fx"],
            fy=d["fy"],
            cx=d["cx"],
            cy=d["cy"],
            rotation=tuple(tuple(r) for r in d.get("rotation", np.eye(3).tolist())),
            translation=tuple(d.get("translation", (0.0, 0.0, 0.0))),
        )
    raise ValidationError(f"unknown camera type {kind!r}")


# ---------------------------------------------------------------------------
# Motion clips and metrics


@dataclass
class MotionClip:
    """Aligned point clouds (T, P, 3) with persistent point identity."""

    positions: np.ndarray
    submodel_ids: np.ndarray | None = None
    camera: Camera | None = None

    def __post_init__(self) -> None:
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim != 3 or pos.shape[2] != 3:
            raise ValidationError(f"positions must be (T, P, 3), got {pos.shape}")
        if pos.shape[0] < 2:
            raise ValidationError("a motion clip needs at least 2 timesteps")
        if pos.shape[1] < 1:
            raise ValidationError("a motion clip needs at least 1 point")
        if not np.isfinite(pos).all():
            raise ValidationError("clip contains non-finite coordinates")
        self.positions = pos
        if self.submodel_ids is not None:
            ids = np.asarray(self.submodel_ids, dtype=int)
            if ids.shape != (pos.shape[1],):
                raise ValidationError("submodel ids must be one per point")
            self.submodel_ids = ids

    @property
    def timesteps(self) -> int:
        return int(self.positions.shape[0])

    @property
    def point_count(self) -> int:
        return int(self.positions.shape[1])


def total_displacements(clip: MotionClip) -> np.ndarray:
    """Per-point path length: sum of consecutive Euclidean step lengths."""
    steps = np.diff(clip.positions, axis=0)
    return np.linalg.norm(steps, axis=2).sum(axis=0)


@dataclass(frozen=True)
class MotionMetrics:
    """Summary statistics of one clip, the filter's feature vector."""

    bbox_dims: tuple[float, float, float]
    bbox_center: tuple[float, float, float]
    largest_frame_bbox: float  # diagonal of the largest single-timestep bbox
    mean_total_displacement: float
    max_total_displacement: float

    def as_vector(self) -> np.ndarray:
        return np.array(
            [
                *self.bbox_dims,
                *self.bbox_center,
                self.largest_frame_bbox,
                self.mean_total_displacement,
                self.max_total_displacement,
            ]
        )

    def to_dict(self) -> dict:
        return {
            "bbox_dims": list(self.bbox_dims),
            "bbox_center": list(self.bbox_center),
            "largest_frame_bbox": self.largest_frame_bbox,
            "mean_total_displacement": self.mean_total_displacement,
            "max_total_displacement": self.max_total_displacement,
        }


def compute_motion_metrics(clip: MotionClip) -> MotionMetrics:
    pos = clip.positions
    lo = pos.reshape(-1, 3).min(axis=0)
    hi = pos.reshape(-1, 3).max(axis=0)
    per_frame_dims = pos.max(axis=1) - pos.min(axis=1)  # (T, 3)
    disp = total_displacements(clip)
    return MotionMetrics(
        bbox_dims=tuple(hi - lo),
        bbox_center=tuple((hi + lo) / 2.0),
        largest_frame_bbox=float(np.linalg.norm(per_frame_dims, axis=1).max()),
        mean_total_displacement=float(disp.mean()),
        max_total_displacement=float(disp.max()),
    )


# ---------------------------------------------------------------------------
# Animation filter


@dataclass(frozen=True)
class FilterConfig:
    n_trees: int = 60
    max_depth: int = 6
    seed: int = 0


@dataclass
class FilterModel:
    forest: RandomForest
    training_accuracy: float

    def keep(self, metrics: MotionMetrics) -> bool:
        return bool(self.forest.predict(metrics.as_vector()[None, :])[0] == 1)

    def save(self, path) -> None:
        payload = {"training_accuracy": self.training_accuracy, "forest": self.forest.to_dict()}
        with open(path, "w") as f:
            json.dump(payload, f)

    @staticmethod
    def load(path) -> "FilterModel":
        with open(path) as f:
            payload = json.load(f)
        return FilterModel(
            forest=RandomForest.from_dict(payload["forest"]),
            training_accuracy=payload["training_accuracy"],
        )


def train_filter(
    samples: Sequence[tuple[MotionMetrics, bool]], config: FilterConfig = FilterConfig()
) -> FilterModel:
    """Fit the keep/discard forest on labeled metric vectors."""
    if not samples:
        raise ValidationError("no training samples")
    x = np.stack([m.as_vector() for m, _ in samples])
    y = np.array([1 if keep else 0 for _, keep in samples])
    forest = RandomForest(
        n_trees=config.n_trees, max_depth=config.max_depth, seed=config.seed
    ).fit(x, y)
    return FilterModel(forest=forest, training_accuracy=forest.accuracy(x, y))


# ---------------------------------------------------------------------------
# Realism review


class ReviewServiceError(RuntimeError):
    """The review service could not be reached or failed server-side."""


class MalformedReplyError(ValueError):
    """The review service answered with something other than Yes/No."""


class ReviewClient(Protocol):
    def complete(self, system_prompt: str, user_prompt: str, images: Sequence) -> str: ...


class MockReviewClient:
    """Deterministic offline stand-in; answers a fixed word or a script."""

    def __init__(self, answer: str = "No", script: Sequence[str] | None = None):
        self.answer = answer
        self.script = list(script) if script is not None else None
        self.calls: list[tuple[str, str, int]] = []

    def complete(self, system_prompt: str, user_prompt: str, images: Sequence) -> str:
        self.calls.append((system_prompt, user_prompt, len(images)))
        if self.script is not None:
            if not self.script:
                raise ReviewServiceError("mock script exhausted")
            return self.script.pop(0)
        return self.answer


class HttpReviewClient:
    """POSTs prompts plus base64 frames to a multimodal completion endpoint.

    Requires an access token in the environment; never exercised in tests.
    """

    def __init__(self, url: str, token_env: str = REVIEW_TOKEN_ENV, timeout: float = 60.0):
        import os

        self.url = url
        self.timeout = timeout
        self.token = os.environ.get(token_env)
        if not self.token:
            raise ValidationError(f"review service token missing; set {token_env}")

    def complete(self, system_prompt: str, user_prompt: str, images: Sequence) -> str:
        from .images import frame_to_base64

        payload = {
            "system": system_prompt,
            "user": user_prompt,
            "images": [
                img if isinstance(img, str) else frame_to_base64(np.asarray(img))
                for img in images
            ],
        }
        try:
            resp = requests.post(
                self.url,
                json=payload,
                headers={"Authorization": f"Bearer {self.token}"},
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise ReviewServiceError(str(exc)) from exc
        if resp.status_code != 200:
            raise ReviewServiceError(f"review service returned {resp.status_code}")
        try:
            return resp.json()["reply"]
        except (ValueError, KeyError) as exc:
            raise MalformedReplyError(f"unparseable service response: {exc}") from exc


def parse_review_reply(reply: str) -> bool:
    """Normalize a one-word reply; True means the clip is filtered out."""
    word = reply.strip().strip(".!,:;\"'").casefold()
    if word == "yes":
        return True
    if word == "no":
        return False
    raise MalformedReplyError(f"expected a single-word Yes/No answer, got {reply!r}")


def realism_review_request(
    renders: Sequence,
    client: ReviewClient,
    retries: int = 3,
    backoff: float = 0.5,
    sleep=time.sleep,
) -> bool:
    """Ask the review client whether to keep a clip; returns keep.

    Exactly 4 renders at the animation quarters are required.  Network
    failures are retried with exponential backoff, then surfaced; a
    malformed reply surfaces immediately.
    """
    if len(renders) != 4:
        raise ValidationError(f"realism review needs exactly 4 renders, got {len(renders)}")
    last: ReviewServiceError | None = None
    for attempt in range(retries + 1):
        try:
            reply = client.complete(REVIEW_SYSTEM_PROMPT, REVIEW_USER_PROMPT, renders)
        except ReviewServiceError as exc:
            last = exc
            if attempt < retries:
                sleep(backoff * (2.0**attempt))
            continue
        return not parse_review_reply(reply)
    raise last


# ---------------------------------------------------------------------------
# Drag sampling


class NoVisibleMovingPointError(ValueError):
    """No frame-1-visible point with positive displacement exists."""


def visible_points(
    clip: MotionClip,
    camera: Camera,
    res: Resolution,
    splat_radius: int = 1,
    depth_tol: float = 1e-6,
) -> np.ndarray:
    """First-frame visibility by a point z-buffer with a splat radius."""
    pix, depth = camera.project(clip.positions[0], res)
    cells = np.rint(pix).astype(int)
    in_bounds = (
        (cells[:, 0] >= 0)
        & (cells[:, 0] < res.height)
        & (cells[:, 1] >= 0)
        & (cells[:, 1] < res.width)
    )
    buffer = np.full((res.height, res.width), np.inf)
    for i in np.flatnonzero(in_bounds):
        h, w = cells[i]
        h0, h1 = max(0, h - splat_radius), min(res.height, h + splat_radius + 1)
        w0, w1 = max(0, w - splat_radius), min(res.width, w + splat_radius + 1)
        patch = buffer[h0:h1, w0:w1]
        np.minimum(patch, depth[i], out=patch)
    visible = np.zeros(clip.point_count, dtype=bool)
    for i in np.flatnonzero(in_bounds):
        h, w = cells[i]
        visible[i] = depth[i] <= buffer[h, w] + depth_tol
    return visible


def _project_drag(
    clip: MotionClip, camera: Camera, res: Resolution, point_index: int
) -> Drag:
    traj3d = clip.positions[:, point_index, :]
    pix, _ = camera.project(traj3d, res)
    points = np.rint(pix).astype(int)
    points[:, 0] = points[:, 0].clip(0, res.height - 1)
    points[:, 1] = points[:, 1].clip(0, res.width - 1)
    return Drag.from_points(points)


def sample_drags(
    clip: MotionClip,
    camera: Camera,
    rng: np.random.Generator,
    res: Resolution,
    k_max: int = 5,
    moving_fraction: float = 0.1,
) -> DragSet:
    """Sample drags with probability proportional to total displacement.

    With sub-model ids: one drag per moving sub-model (mean displacement at
    least ``moving_fraction`` of the clip's max point displacement).
    Without: a random count in [1, k_max].  Candidates are restricted to
    points visible in the first frame.
    """
    if camera is None:
        raise ValidationError("sample_drags requires a camera")
    disp = total_displacements(clip)
    visible = visible_points(clip, camera, res)
    candidates = visible & (disp > 0.0)
    if not candidates.any():
        raise NoVisibleMovingPointError(
            "no point with positive displacement is visible in frame 1"
        )

    chosen: list[int] = []
    if clip.submodel_ids is not None:
        max_disp = disp.max()
        groups = []
        for sid in np.unique(clip.submodel_ids):
            members = clip.submodel_ids == sid
            mean_disp = float(disp[members].mean())
            if mean_disp >= moving_fraction * max_disp and (candidates & members).any():
                groups.append((mean_disp, sid))
        groups.sort(reverse=True)
        for _, sid in groups[:k_max]:
            pool = np.flatnonzero(candidates & (clip.submodel_ids == sid))
            weights = disp[pool] / disp[pool].sum()
            chosen.append(int(rng.choice(pool, p=weights)))
        if not chosen:
            raise NoVisibleMovingPointError("no moving sub-model with visible points")
    else:
        pool = np.flatnonzero(candidates)
        count = min(int(rng.integers(1, k_max + 1)), len(pool))
        weights = disp[pool] / disp[pool].sum()
        picks = rng.choice(pool, size=count, replace=False, p=weights)
        chosen = [int(i) for i in np.atleast_1d(picks)]

    drags = DragSet.of([_project_drag(clip, camera, res, i) for i in chosen], k_max=k_max)
    return validate_drag_set(drags, res, clip.timesteps)


def default_dedup_delta(frame_count: int, res: Resolution) -> float:
    """20N at 256x256, scaled proportionally to pixel area."""
    return 20.0 * frame_count * (res.height * res.width) / (256.0 * 256.0)


def dedup_drags(drags: DragSet, delta: float, rng: np.random.Generator) -> DragSet:
    """Randomly drop one member of any drag pair closer than delta.

    Repeats until no pair of trajectories has squared distance <= delta.
    """
    kept = list(drags.drags)
    while True:
        violating = None
        for i in range(len(kept)):
            for j in range(i + 1, len(kept)):
                a, b = kept[i].as_array(), kept[j].as_array()
                if a.shape == b.shape and float(((a - b) ** 2).sum()) <= delta:
                    violating = (i, j)
                    break
            if violating:
                break
        if violating is None:
            return DragSet.of(kept, k_max=drags.k_max)
        kept.pop(violating[int(rng.integers(0, 2))])


# ---------------------------------------------------------------------------
# Clip directories and the curation pipeline

_SPLAT_PALETTE = np.array(
    [[40, 60, 200], [200, 60, 40], [40, 170, 60], [170, 40, 170], [200, 160, 40]],
    dtype=np.uint8,
)


def write_clip(clip_dir, clip: MotionClip) -> None:
    d = Path(clip_dir)
    d.mkdir(parents=True, exist_ok=True)
    np.save(d / "positions.npy", clip.positions.astype(np.float32))
    if clip.submodel_ids is not None:
        np.save(d / "submodels.npy", clip.submodel_ids.astype(np.int32))
    if clip.camera is not None:
        with open(d / "camera.json", "w") as f:
            json.dump(clip.camera.to_dict(), f)


def read_clip(clip_dir) -> MotionClip:
    d = Path(clip_dir)
    positions = np.load(d / "positions.npy")
    submodels = np.load(d / "submodels.npy") if (d / "submodels.npy").exists() else None
    camera = None
    if (d / "camera.json").exists():
        with open(d / "camera.json") as f:
            camera = camera_from_dict(json.load(f))
    return MotionClip(positions=positions, submodel_ids=submodels, camera=camera)


def render_clip_frame(
    clip: MotionClip, camera: Camera, res: Resolution, t: int, splat_radius: int = 1
) -> np.ndarray:
    """Crude splat rendering of one timestep, enough for the review client."""
    pix, depth = camera.project(clip.positions[t], res)
    img = np.full((res.height, res.width, 3), 255, dtype=np.uint8)
    order = np.argsort(-depth)  # far to near
    cells = np.rint(pix).astype(int)
    for i in order:
        h, w = cells[i]
        if not (0 <= h < res.height and 0 <= w < res.width):
            continue
        color = _SPLAT_PALETTE[
            int(clip.submodel_ids[i]) % len(_SPLAT_PALETTE)
            if clip.submodel_ids is not None
            else 0
        ]
        h0, h1 = max(0, h - splat_radius), min(res.height, h + splat_radius + 1)
        w0, w1 = max(0, w - splat_radius), min(res.width, w + splat_radius + 1)
        img[h0:h1, w0:w1] = color
    return img


def curate_directory(
    clips_root,
    out_path,
    filter_model: FilterModel | None = None,
    review_client: ReviewClient | None = None,
    rng: np.random.Generator | None = None,
    res: Resolution = Resolution(256, 256),
    k_max: int = 5,
) -> dict:
    """Run metrics, filtering, optional review, and drag sampling per clip."""
    rng = rng if rng is not None else np.random.default_rng(0)
    root = Path(clips_root)
    entries = []
    for clip_dir in sorted(p for p in root.iterdir() if (p / "positions.npy").exists()):
        clip = read_clip(clip_dir)
        camera = clip.camera if clip.camera is not None else OrthographicCamera()
        metrics = compute_motion_metrics(clip)
        kept_filter = filter_model.keep(metrics) if filter_model is not None else True
        kept_review = True
        if kept_filter and review_client is not None:
            quarters = np.round(np.linspace(0, clip.timesteps - 1, 4)).astype(int)
            renders = [render_clip_frame(clip, camera, res, int(t)) for t in quarters]
            kept_review = realism_review_request(renders, review_client)
        kept = kept_filter and kept_review
        entry = {
            "id": clip_dir.name,
            "metrics": metrics.to_dict(),
            "kept_filter": kept_filter,
            "kept_review": kept_review,
            "kept": kept,
        }
        if kept:
            try:
                drags = sample_drags(clip, camera, rng, res, k_max=k_max)
                drags = dedup_drags(
                    drags, default_dedup_delta(clip.timesteps, res), rng
                )
                entry["drags"] = [
                    {"origin": list(d.origin), "points": [list(p) for p in d.trajectory]}
                    for d in drags
                ]
            except NoVisibleMovingPointError:
                entry["kept"] = False
                entry["drags"] = []
                entry["drag_error"] = "no visible moving point"
        entries.append(entry)
    manifest = {"resolution": [res.height, res.width], "clips": entries}
    with open(out_path, "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest
