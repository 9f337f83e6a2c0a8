"""Sample-level evaluation against toyworld ground truth.

Predicted trajectories for a generated video are estimated without a
learned tracker: parts are segmented by nearest reference color, and each
ground-truth point is advanced by its part's mask-centroid shift.  The
static baseline evaluates a frozen copy of the reference frame through
the identical pipeline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import metrics
from .metrics import (
    ROLE_FOREGROUND,
    ROLE_ORIGIN,
    DirectionCase,
    EmptyMaskError,
    TrajectorySet,
)
from .toyworld import DatasetSample
from .types import Video

MAX_FOREGROUND_POINTS = 256


def ground_truth_trajectories(sample: DatasetSample) -> TrajectorySet:
    """Foreground points (subsampled to <= 256) plus drag origins."""
    ids, roles, points = [], [], []
    for k, drag in enumerate(sample.drags):
        track = _gt_track_for_pixel(sample, sample.drag_parts[k], drag.origin)
        ids.append(f"origin_{k}")
        roles.append(ROLE_ORIGIN)
        points.append(track)

    part_ids = sorted(sample.pixels)
    total = sum(len(sample.pixels[j]) for j in part_ids)
    stride = max(1, math.ceil(total / MAX_FOREGROUND_POINTS))
    for j in part_ids:
        for idx in range(0, len(sample.pixels[j]), stride):
            ids.append(f"p{j}_{idx}")
            roles.append(ROLE_FOREGROUND)
            points.append(sample.tracks[j][idx])
    return TrajectorySet(ids=ids, roles=roles, points=np.stack(points))


def _gt_track_for_pixel(sample: DatasetSample, part: int, pixel) -> np.ndarray:
    pix = sample.pixels[part]
    match = np.flatnonzero((pix[:, 0] == pixel[0]) & (pix[:, 1] == pixel[1]))
    if len(match):
        return sample.tracks[part][match[0]]
    # Drag origins are rounded; fall back to the nearest tracked pixel.
    nearest = int(np.argmin(((pix - np.asarray(pixel)) ** 2).sum(axis=1)))
    return sample.tracks[part][nearest]


def centroid_shift_trajectories(
    pred_masks: np.ndarray, gt: TrajectorySet, sample: DatasetSample
) -> TrajectorySet:
    """Advance each ground-truth point by its part's centroid shift.

    Empty estimated masks freeze the centroid at its last known value.
    """
    n = pred_masks.shape[0]
    centroids: dict[int, np.ndarray] = {}
    for j in sorted(sample.pixels):
        per_frame = np.zeros((n, 2))
        last = None
        for frame in range(n):
            try:
                last = metrics.mask_centroid(pred_masks[frame] == j)
            except EmptyMaskError:
                last = last if last is not None else np.zeros(2)
            per_frame[frame] = last
        centroids[j] = per_frame

    points = np.empty_like(gt.points)
    for m, point_id in enumerate(gt.ids):
        part = _part_of_point(point_id, sample)
        shift = centroids[part] - centroids[part][0]
        points[m] = gt.points[m][0] + shift
    return TrajectorySet(ids=list(gt.ids), roles=list(gt.roles), points=points)


def _part_of_point(point_id: str, sample: DatasetSample) -> int:
    if point_id.startswith("origin_"):
        return sample.drag_parts[int(point_id.split("_")[1])]
    return int(point_id.split("_")[0][1:])


def direction_cases(pred_masks: np.ndarray, sample: DatasetSample) -> tuple[list, int]:
    """DirectionCase per drag; empty-mask drags are counted as failures."""
    cases = []
    failures = 0
    for k, drag in enumerate(sample.drags):
        part = sample.drag_parts[k]
        first = pred_masks[0] == part
        last = pred_masks[-1] == part
        if not first.any() or not last.any():
            failures += 1
            continue
        cases.append(DirectionCase(first_mask=first, last_mask=last, drag=drag))
    return cases, failures


@dataclass
class SampleReport:
    sample_id: str
    psnr: float
    ssim: float
    flow_error_origins: float
    flow_error_foreground: float
    static_flow_error_foreground: float
    direction_correct: int
    direction_total: int

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "psnr": None if math.isinf(self.psnr) else self.psnr,
            "psnr_identical": math.isinf(self.psnr),
            "ssim": self.ssim,
            "flow_error_origins": self.flow_error_origins,
            "flow_error_foreground": self.flow_error_foreground,
            "static_flow_error_foreground": self.static_flow_error_foreground,
            "direction_correct": self.direction_correct,
            "direction_total": self.direction_total,
        }


def evaluate_sample(pred: Video, sample: DatasetSample) -> SampleReport:
    gt = ground_truth_trajectories(sample)
    pred_masks = metrics.estimate_part_masks(pred, sample.part_colors, sample.background)
    pred_traj = centroid_shift_trajectories(pred_masks, gt, sample)

    static = Video(frames=np.repeat(sample.video.frames[:1], pred.frame_count, axis=0))
    static_masks = metrics.estimate_part_masks(
        static, sample.part_colors, sample.background
    )
    static_traj = centroid_shift_trajectories(static_masks, gt, sample)

    cases, failures = direction_cases(pred_masks, sample)
    correct = sum(
        metrics.direction_correct(
            metrics.mask_centroid(c.last_mask) - metrics.mask_centroid(c.first_mask), c.drag
        )
        for c in cases
    )
    return SampleReport(
        sample_id=sample.sample_id,
        psnr=metrics.psnr(pred, sample.video),
        ssim=metrics.ssim(pred, sample.video),
        flow_error_origins=metrics.flow_error(pred_traj, gt, mode=ROLE_ORIGIN),
        flow_error_foreground=metrics.flow_error(pred_traj, gt, mode=ROLE_FOREGROUND),
        static_flow_error_foreground=metrics.flow_error(static_traj, gt, mode=ROLE_FOREGROUND),
        direction_correct=correct,
        direction_total=len(cases) + failures,
    )


def aggregate_reports(reports: list[SampleReport]) -> dict:
    finite_psnr = [r.psnr for r in reports if not math.isinf(r.psnr)]
    total_cases = sum(r.direction_total for r in reports)
    return {
        "samples": len(reports),
        "psnr_mean": float(np.mean(finite_psnr)) if finite_psnr else None,
        "psnr_all_identical": not finite_psnr,
        "ssim_mean": float(np.mean([r.ssim for r in reports])),
        "flow_error_origins_mean": float(np.mean([r.flow_error_origins for r in reports])),
        "flow_error_foreground_mean": float(
            np.mean([r.flow_error_foreground for r in reports])
        ),
        "static_flow_error_foreground_mean": float(
            np.mean([r.static_flow_error_foreground for r in reports])
        ),
        "direction_accuracy": (
            sum(r.direction_correct for r in reports) / total_cases if total_cases else None
        ),
    }
