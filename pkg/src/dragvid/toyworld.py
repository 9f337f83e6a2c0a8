"""Procedural articulated-sprite videos with exact part trajectories.

Scenes are 2-4 flat-colored rigid parts on a light background: a static
root plus movers attached by hinge (rotation about a pivot) or prismatic
(translation along an axis) joints.  Motion parameters ramp linearly from
zero, so frame 0 is the rest pose.  Every interior pixel of each part in
frame 0 is tracked analytically through the rigid motion, giving exact
ground-truth trajectories for training drags and evaluation.

Also provides the 3-D synthetic motion-clip benchmark (static /
rigid-translation / articulated point clouds) used to exercise the
curation filter.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import images
from .curation import MotionClip, default_dedup_delta, dedup_drags
from .types import Drag, DragSet, Resolution, RunConfig, Video, validate_drag_set

MOVING_PATH_THRESHOLD = 0.5  # px of per-pixel path length


@dataclass(frozen=True)
class BaseShape:
    """Rigid 2-D shape in frame-0 world coordinates (h, w)."""

    kind: str  # "rect" | "disk"
    center: tuple[float, float]
    half_extents: tuple[float, float]  # disk uses (r, r)
    angle: float = 0.0  # rect orientation, radians


@dataclass(frozen=True)
class Joint:
    kind: str  # "fixed" | "hinge" | "prismatic"
    pivot: tuple[float, float] = (0.0, 0.0)
    axis: tuple[float, float] = (0.0, 1.0)
    amplitude: float = 0.0  # radians (hinge) or pixels (prismatic)


@dataclass(frozen=True)
class Part:
    shape: BaseShape
    color: tuple[float, float, float]  # [0, 1]
    joint: Joint


@dataclass(frozen=True)
class ArticulatedScene:
    parts: tuple[Part, ...]
    background: tuple[float, float, float]
    resolution: Resolution
    frame_count: int
    seed: int


@dataclass
class SceneData:
    """Rendered scene: video, per-frame part-id masks, exact trajectories."""

    video: Video
    masks: np.ndarray  # (N, H, W) int8, -1 = background
    pixels: dict[int, np.ndarray]  # part -> (P, 2) frame-0 pixel coords
    tracks: dict[int, np.ndarray]  # part -> (P, N, 2) float positions
    scene: ArticulatedScene


def joint_transform(joint: Joint, theta: float) -> tuple[np.ndarray, np.ndarray]:
    """Rigid map p' = R p + t for the joint at parameter theta."""
    if joint.kind == "fixed":
        return np.eye(2), np.zeros(2)
    if joint.kind == "hinge":
        c, s = np.cos(theta), np.sin(theta)
        rot = np.array([[c, -s], [s, c]])
        pivot = np.asarray(joint.pivot)
        return rot, pivot - rot @ pivot
    if joint.kind == "prismatic":
        return np.eye(2), theta * np.asarray(joint.axis)
    raise ValueError(f"unknown joint kind {joint.kind!r}")


def motion_parameter(joint: Joint, frame: int, frame_count: int) -> float:
    """Linear ramp from 0 to the joint amplitude across the clip."""
    if frame_count == 1:
        return 0.0
    return joint.amplitude * frame / (frame_count - 1)


def track_point(part: Part, p0: np.ndarray, frame_count: int) -> np.ndarray:
    """Exact (N, 2) trajectory of a frame-0 point under the part's motion."""
    out = np.empty((frame_count, 2))
    for n in range(frame_count):
        rot, t = joint_transform(part.joint, motion_parameter(part.joint, n, frame_count))
        out[n] = rot @ np.asarray(p0, dtype=float) + t
    return out


def _inside(part: Part, q_h: np.ndarray, q_w: np.ndarray) -> np.ndarray:
    shape = part.shape
    ch, cw = shape.center
    if shape.kind == "disk":
        return (q_h - ch) ** 2 + (q_w - cw) ** 2 <= shape.half_extents[0] ** 2
    ca, sa = np.cos(shape.angle), np.sin(shape.angle)
    rh, rw = q_h - ch, q_w - cw
    lh = ca * rh + sa * rw
    lw = -sa * rh + ca * rw
    return (np.abs(lh) <= shape.half_extents[0]) & (np.abs(lw) <= shape.half_extents[1])


def render_scene(scene: ArticulatedScene) -> tuple[Video, np.ndarray]:
    """Rasterize all frames; painter's order, movers drawn over the root."""
    res, n = scene.resolution, scene.frame_count
    hh, ww = np.meshgrid(
        np.arange(res.height, dtype=float), np.arange(res.width, dtype=float), indexing="ij"
    )
    frames = np.empty((n, res.height, res.width, 3), dtype=np.float32)
    masks = np.full((n, res.height, res.width), -1, dtype=np.int8)
    bg = np.asarray(scene.background, dtype=np.float32)
    for frame in range(n):
        rgb = np.broadcast_to(bg, (res.height, res.width, 3)).copy()
        for j, part in enumerate(scene.parts):
            rot, t = joint_transform(
                part.joint, motion_parameter(part.joint, frame, n)
            )
            # Inverse rigid map: q = R^T (p - t).
            ph, pw = hh - t[0], ww - t[1]
            q_h = rot[0, 0] * ph + rot[1, 0] * pw
            q_w = rot[0, 1] * ph + rot[1, 1] * pw
            inside = _inside(part, q_h, q_w)
            masks[frame][inside] = j
            rgb[inside] = np.asarray(part.color, dtype=np.float32)
        frames[frame] = rgb * 2.0 - 1.0
    return Video(frames=frames), masks


def _support_points(part: Part, theta: float) -> np.ndarray:
    """Extreme points of the transformed shape, for the in-frame check."""
    shape = part.shape
    rot, t = joint_transform(part.joint, theta)
    if shape.kind == "disk":
        c = rot @ np.asarray(shape.center) + t
        r = shape.half_extents[0]
        return np.array([c + [r, 0], c - [r, 0], c + [0, r], c - [0, r]])
    ca, sa = np.cos(shape.angle), np.sin(shape.angle)
    eh, ew = shape.half_extents
    corners = []
    for dh in (-eh, eh):
        for dw in (-ew, ew):
            local = np.array(
                [ca * dh - sa * dw + shape.center[0], sa * dh + ca * dw + shape.center[1]]
            )
            corners.append(rot @ local + t)
    return np.asarray(corners)


def _scene_in_frame(scene: ArticulatedScene, margin: float = 1.0) -> bool:
    res = scene.resolution
    for part in scene.parts:
        for frame in range(scene.frame_count):
            theta = motion_parameter(part.joint, frame, scene.frame_count)
            pts = _support_points(part, theta)
            if (
                pts[:, 0].min() < margin
                or pts[:, 1].min() < margin
                or pts[:, 0].max() > res.height - 1 - margin
                or pts[:, 1].max() > res.width - 1 - margin
            ):
                return False
    return True


def _palette(rng: np.random.Generator, count: int) -> list[tuple[float, float, float]]:
    base = rng.random()
    colors = []
    for i in range(count):
        hue = (base + i / count + rng.uniform(-0.04, 0.04)) % 1.0
        sat = rng.uniform(0.7, 0.95)
        val = rng.uniform(0.45, 0.8)
        colors.append(colorsys.hsv_to_rgb(hue, sat, val))
    return colors


def _propose_scene(
    rng: np.random.Generator, res: Resolution, frame_count: int, seed: int, max_movers: int
) -> ArticulatedScene:
    scale = min(res.height, res.width)
    n_movers = int(rng.integers(1, max_movers + 1))
    colors = _palette(rng, n_movers + 1)
    background = tuple(0.82 + 0.14 * rng.random(3))

    center = (
        res.height / 2 + rng.uniform(-0.06, 0.06) * scale,
        res.width / 2 + rng.uniform(-0.06, 0.06) * scale,
    )
    root_he = (rng.uniform(0.13, 0.19) * scale, rng.uniform(0.13, 0.19) * scale)
    root = Part(
        shape=BaseShape("rect", center, root_he, angle=rng.uniform(-0.25, 0.25)),
        color=colors[0],
        joint=Joint("fixed"),
    )

    parts = [root]
    phis = rng.permutation(4)[:n_movers] * (np.pi / 2) + rng.uniform(-0.3, 0.3, n_movers)
    for m in range(n_movers):
        d = np.array([np.cos(phis[m]), np.sin(phis[m])])
        pivot = np.asarray(center) + d * np.asarray(root_he) * 1.02
        length = rng.uniform(0.18, 0.28) * scale
        thickness = rng.uniform(0.045, 0.08) * scale
        if rng.random() < 0.5:
            shape = BaseShape(
                "rect",
                tuple(pivot + d * length / 2),
                (length / 2, thickness),
                angle=float(np.arctan2(d[1], d[0])),
            )
        else:
            radius = rng.uniform(0.07, 0.11) * scale
            shape = BaseShape("disk", tuple(pivot + d * (length / 2 + radius / 2)), (radius, radius))
        if rng.random() < 0.5:
            sign = 1.0 if rng.random() < 0.5 else -1.0
            joint = Joint(
                "hinge", pivot=tuple(pivot), amplitude=sign * rng.uniform(0.8, 1.6)
            )
        else:
            axis = np.array([np.cos(phis[m] + np.pi / 2), np.sin(phis[m] + np.pi / 2)])
            sign = 1.0 if rng.random() < 0.5 else -1.0
            joint = Joint(
                "prismatic",
                axis=tuple(sign * axis),
                amplitude=rng.uniform(0.18, 0.3) * scale,
            )
        parts.append(Part(shape=shape, color=colors[m + 1], joint=joint))

    return ArticulatedScene(
        parts=tuple(parts),
        background=background,
        resolution=res,
        frame_count=frame_count,
        seed=seed,
    )


def _parts_visible(masks: np.ndarray, n_parts: int, min_pixels: int = 4) -> bool:
    for j in range(n_parts):
        counts = (masks == j).sum(axis=(1, 2))
        if counts.min() < min_pixels:
            return False
    return True


def generate_scene(
    seed: int, res: Resolution, frame_count: int, max_movers: int = 3
) -> SceneData:
    """Deterministic scene for a seed; resamples internally until every
    part stays in frame and visible in every frame."""
    for attempt in range(200):
        rng = np.random.default_rng([seed, attempt])
        scene = _propose_scene(rng, res, frame_count, seed, max_movers)
        if not _scene_in_frame(scene):
            continue
        video, masks = render_scene(scene)
        if not _parts_visible(masks, len(scene.parts)):
            continue
        pixels, tracks = {}, {}
        for j, part in enumerate(scene.parts):
            pix = np.argwhere(masks[0] == j)
            pixels[j] = pix
            tr = np.empty((len(pix), frame_count, 2), dtype=np.float32)
            for idx, p0 in enumerate(pix):
                tr[idx] = track_point(part, p0.astype(float), frame_count)
            tracks[j] = tr
        return SceneData(video=video, masks=masks, pixels=pixels, tracks=tracks, scene=scene)
    raise RuntimeError(f"no in-frame scene found for seed {seed}")


def path_lengths(tracks: np.ndarray) -> np.ndarray:
    """Per-point path length of (P, N, 2) trajectories."""
    if tracks.shape[1] < 2:
        return np.zeros(len(tracks))
    return np.linalg.norm(np.diff(tracks, axis=1), axis=2).sum(axis=1)


def moving_parts(data: SceneData) -> list[int]:
    out = []
    for j in data.tracks:
        lengths = path_lengths(data.tracks[j])
        if len(lengths) and lengths.max() > MOVING_PATH_THRESHOLD:
            out.append(j)
    return out


def make_training_triplet(
    data: SceneData, rng: np.random.Generator, k_max: int = 5, dedup_delta: float | None = None
) -> tuple[Video, np.ndarray, DragSet]:
    """One drag per moving part, origin sampled proportional to path length."""
    res, n = data.scene.resolution, data.scene.frame_count
    movers = moving_parts(data)
    if not movers:
        raise ValueError("scene has no moving part")
    if len(movers) > k_max:
        by_motion = sorted(
            movers, key=lambda j: -float(path_lengths(data.tracks[j]).mean())
        )
        movers = sorted(by_motion[:k_max])
    drags = []
    for j in movers:
        lengths = path_lengths(data.tracks[j])
        probs = lengths / lengths.sum()
        idx = int(rng.choice(len(probs), p=probs))
        track = data.tracks[j][idx]
        points = np.rint(track).astype(int)
        points[:, 0] = points[:, 0].clip(0, res.height - 1)
        points[:, 1] = points[:, 1].clip(0, res.width - 1)
        drags.append(Drag.from_points(points))
    if dedup_delta is None:
        dedup_delta = default_dedup_delta(n, res)
    drag_set = dedup_drags(DragSet.of(drags, k_max=k_max), dedup_delta, rng)
    validate_drag_set(drag_set, res, n)
    return data.video, data.video.reference, drag_set


# ---------------------------------------------------------------------------
# Dataset on disk


def config_hash(config: RunConfig, seeds: list[int]) -> str:
    digest = hashlib.sha256(
        json.dumps({"config": config.to_dict(), "seeds": seeds}, sort_keys=True).encode()
    )
    return digest.hexdigest()


def write_dataset(out_dir, config: RunConfig, num_scenes: int) -> dict:
    """Materialize scenes as image files plus drag/part metadata."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = config.resolution
    seeds = [config.seed + i for i in range(num_scenes)]
    sample_ids = []
    for idx, seed in enumerate(seeds):
        data = generate_scene(seed, res, config.frame_count)
        rng = np.random.default_rng([seed, 7_777])
        video, _, drags = make_training_triplet(data, rng, k_max=config.k_max)
        sample_id = f"sample_{idx:05d}"
        sample_dir = out / sample_id
        sample_dir.mkdir(exist_ok=True)

        mask_files = []
        for n in range(config.frame_count):
            images.save_frame(sample_dir / f"frame_{n:03d}.png", video.frames[n])
            mask_name = f"mask_{n:03d}.png"
            images.Image.fromarray((data.masks[n] + 1).astype(np.uint8)).save(
                sample_dir / mask_name
            )
            mask_files.append(mask_name)

        part_to_drag = {}
        for j in moving_parts(data):
            part_to_drag[j] = None
        drag_entries = []
        for drag in drags:
            origin = np.asarray(drag.origin)
            part = int(data.masks[0][origin[0], origin[1]])
            drag_entries.append(
                {
                    "origin": list(drag.origin),
                    "points": [list(p) for p in drag.trajectory],
                    "part": part,
                }
            )
        with open(sample_dir / "drags.json", "w") as f:
            json.dump(
                {
                    "height": res.height,
                    "width": res.width,
                    "frame_count": config.frame_count,
                    "k_max": config.k_max,
                    "drags": drag_entries,
                },
                f,
                indent=2,
            )

        arrays = {}
        for j in data.pixels:
            arrays[f"pixels_{j}"] = data.pixels[j].astype(np.int16)
            arrays[f"track_{j}"] = data.tracks[j].astype(np.float32)
        np.savez_compressed(sample_dir / "trajectories.npz", **arrays)

        with open(sample_dir / "parts.json", "w") as f:
            json.dump(
                {
                    "background": list(data.scene.background),
                    "parts": [
                        {
                            "id": j,
                            "color": list(data.scene.parts[j].color),
                            "moving": j in part_to_drag,
                            "pixel_count": int(len(data.pixels[j])),
                        }
                        for j in range(len(data.scene.parts))
                    ],
                    "mask_files": mask_files,
                    "trajectory_file": "trajectories.npz",
                },
                f,
                indent=2,
            )
        sample_ids.append(sample_id)

    manifest = {
        "config": config.to_dict(),
        "seeds": seeds,
        "samples": sample_ids,
        "config_hash": config_hash(config, seeds),
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest


@dataclass
class DatasetSample:
    sample_id: str
    video: Video
    masks: np.ndarray  # (N, H, W) int, -1 background
    drags: DragSet
    drag_parts: list[int]
    part_colors: dict[int, np.ndarray]  # [0, 1] rgb
    background: np.ndarray
    pixels: dict[int, np.ndarray]
    tracks: dict[int, np.ndarray]


def load_manifest(root) -> dict:
    with open(Path(root) / "manifest.json") as f:
        return json.load(f)


def list_samples(root) -> list[str]:
    return list(load_manifest(root)["samples"])


def load_sample(root, sample_id: str) -> DatasetSample:
    sample_dir = Path(root) / sample_id
    with open(sample_dir / "drags.json") as f:
        drag_meta = json.load(f)
    with open(sample_dir / "parts.json") as f:
        part_meta = json.load(f)

    n = drag_meta["frame_count"]
    frames = np.stack(
        [images.load_frame(sample_dir / f"frame_{i:03d}.png") for i in range(n)]
    )
    masks = np.stack(
        [
            np.asarray(images.Image.open(sample_dir / name)).astype(np.int16) - 1
            for name in part_meta["mask_files"]
        ]
    )
    drags = DragSet.of(
        [Drag.from_points(entry["points"]) for entry in drag_meta["drags"]],
        k_max=drag_meta.get("k_max", 5),
    )
    drag_parts = [entry["part"] for entry in drag_meta["drags"]]
    colors = {p["id"]: np.asarray(p["color"]) for p in part_meta["parts"]}

    pixels, tracks = {}, {}
    with np.load(sample_dir / part_meta["trajectory_file"]) as npz:
        for key in npz.files:
            j = int(key.split("_")[1])
            if key.startswith("pixels_"):
                pixels[j] = npz[key].astype(int)
            else:
                tracks[j] = npz[key].astype(np.float32)

    return DatasetSample(
        sample_id=sample_id,
        video=Video(frames=frames),
        masks=masks,
        drags=drags,
        drag_parts=drag_parts,
        part_colors=colors,
        background=np.asarray(part_meta["background"]),
        pixels=pixels,
        tracks=tracks,
    )


# ---------------------------------------------------------------------------
# 3-D synthetic motion-clip benchmark for the curation filter

CLIP_KINDS = ("static", "translation", "articulated")


def make_benchmark_clip(
    kind: str, seed: int, timesteps: int = 8, points: int = 48
) -> MotionClip:
    """Synthetic point-cloud clip with motion of a known class.

    static: jitter only; translation: rigid whole-cloud drift; articulated:
    one sub-group swings about a hinge axis while the rest stays put.
    Labels for the filter benchmark are keep = (kind == "articulated").
    """
    if kind not in CLIP_KINDS:
        raise ValueError(f"unknown clip kind {kind!r}")
    rng = np.random.default_rng([CLIP_KINDS.index(kind), seed])
    base = rng.uniform(0.15, 0.85, size=(points, 3))
    jitter = rng.normal(0.0, 4e-4, size=(timesteps, points, 3))
    pos = np.tile(base, (timesteps, 1, 1)) + jitter
    submodels = np.zeros(points, dtype=int)

    if kind == "translation":
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        speed = rng.uniform(0.02, 0.05)
        for t in range(timesteps):
            pos[t] += t * speed * direction
    elif kind == "articulated":
        group = rng.random(points) < rng.uniform(0.3, 0.6)
        if not group.any():
            group[rng.integers(points)] = True
        submodels[group] = 1
        pivot = base[group].mean(axis=0) + rng.normal(0.0, 0.05, 3)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        rate = rng.uniform(0.12, 0.3)
        for t in range(timesteps):
            angle = rate * t
            pos[t][group] = _rotate_about(pos[t][group], pivot, axis, angle)

    return MotionClip(positions=pos, submodel_ids=submodels, camera=None)


def _rotate_about(
    points: np.ndarray, pivot: np.ndarray, axis: np.ndarray, angle: float
) -> np.ndarray:
    rel = points - pivot
    c, s = np.cos(angle), np.sin(angle)
    cross = np.cross(np.broadcast_to(axis, rel.shape), rel)
    dot = rel @ axis
    rotated = rel * c + cross * s + np.outer(dot, axis) * (1.0 - c)
    return rotated + pivot
