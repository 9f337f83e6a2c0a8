"""Evaluation metrics: PSNR, SSIM, flow error, direction accuracy.

Pixel metrics operate on [-1, 1] videos (peak range 2 by default).  Flow
error is the RMSE between matched point trajectories, over drag origins
or all foreground points.  Direction accuracy scores whether the dragged
part's estimated displacement points with the drag vector.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .attention import ShapeError
from .types import Drag, Video


class EmptyMaskError(ValueError):
    """A part mask holds no pixels, so no centroid exists."""


class IdentityMismatchError(ValueError):
    """Predicted and ground-truth trajectory sets disagree on point ids."""


def psnr(a: Video | np.ndarray, b: Video | np.ndarray, peak: float = 2.0) -> float:
    """10 log10(peak^2 / MSE); +inf sentinel for identical inputs."""
    fa = a.frames if isinstance(a, Video) else np.asarray(a)
    fb = b.frames if isinstance(b, Video) else np.asarray(b)
    if fa.shape != fb.shape:
        raise ShapeError(f"psnr shapes disagree: {fa.shape} vs {fb.shape}")
    mse = float(np.mean((fa.astype(np.float64) - fb.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma * sigma))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _ssim_plane(a: np.ndarray, b: np.ndarray, kernel: np.ndarray, c1: float, c2: float) -> float:
    size = kernel.shape[0]
    if a.shape[0] < size or a.shape[1] < size:
        raise ShapeError(f"image {a.shape} smaller than the {size}x{size} SSIM window")

    def filt(img):
        windows = sliding_window_view(img, (size, size))
        return np.einsum("hwij,ij->hw", windows, kernel)

    ux, uy = filt(a), filt(b)
    uxx, uyy, uxy = filt(a * a), filt(b * b), filt(a * b)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    cov = uxy - ux * uy
    num = (2.0 * ux * uy + c1) * (2.0 * cov + c2)
    den = (ux * ux + uy * uy + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


def ssim(
    a: Video | np.ndarray,
    b: Video | np.ndarray,
    data_range: float = 2.0,
    window: int = 11,
    sigma: float = 1.5,
) -> float:
    """Mean structural similarity, Gaussian-weighted windows, averaged over
    frames and channels."""
    fa = a.frames if isinstance(a, Video) else np.asarray(a)
    fb = b.frames if isinstance(b, Video) else np.asarray(b)
    if fa.shape != fb.shape:
        raise ShapeError(f"ssim shapes disagree: {fa.shape} vs {fb.shape}")
    fa = fa.astype(np.float64)
    fb = fb.astype(np.float64)
    kernel = _gaussian_kernel(window, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    values = [
        _ssim_plane(fa[n, :, :, c], fb[n, :, :, c], kernel, c1, c2)
        for n in range(fa.shape[0])
        for c in range(fa.shape[3])
    ]
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# Trajectories and flow error

ROLE_ORIGIN = "origin"
ROLE_FOREGROUND = "foreground"


@dataclass
class TrajectorySet:
    """Named pixel trajectories (M, N, 2) with per-point role tags."""

    ids: list[str]
    roles: list[str]
    points: np.ndarray

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 3 or pts.shape[2] != 2:
            raise ShapeError(f"points must be (M, N, 2), got {pts.shape}")
        if len(self.ids) != pts.shape[0] or len(self.roles) != pts.shape[0]:
            raise ShapeError("ids, roles and points disagree in length")
        for role in self.roles:
            if role not in (ROLE_ORIGIN, ROLE_FOREGROUND):
                raise ValueError(f"unknown role {role!r}")
        self.points = pts

    def save(self, path) -> None:
        payload = {
            "points": [
                {"id": i, "role": r, "coords": p.tolist()}
                for i, r, p in zip(self.ids, self.roles, self.points)
            ]
        }
        with open(path, "w") as f:
            json.dump(payload, f)

    @staticmethod
    def load(path) -> "TrajectorySet":
        with open(path) as f:
            payload = json.load(f)
        entries = payload["points"]
        return TrajectorySet(
            ids=[e["id"] for e in entries],
            roles=[e["role"] for e in entries],
            points=np.asarray([e["coords"] for e in entries], dtype=float),
        )


def flow_error(pred: TrajectorySet, gt: TrajectorySet, mode: str = ROLE_FOREGROUND) -> float:
    """RMSE in pixels between matched trajectories.

    mode "origin" restricts to drag-origin points; "foreground" uses every
    ground-truth point (origins included).
    """
    if mode not in (ROLE_ORIGIN, ROLE_FOREGROUND):
        raise ValueError(f"unknown flow-error mode {mode!r}")
    pred_by_id = {i: p for i, p in zip(pred.ids, pred.points)}
    selected = [
        (i, p)
        for i, r, p in zip(gt.ids, gt.roles, gt.points)
        if mode == ROLE_FOREGROUND or r == ROLE_ORIGIN
    ]
    if not selected:
        raise IdentityMismatchError(f"no ground-truth points for mode {mode!r}")
    sq = []
    for i, gt_pts in selected:
        if i not in pred_by_id:
            raise IdentityMismatchError(f"prediction is missing point id {i!r}")
        p = pred_by_id[i]
        if p.shape != gt_pts.shape:
            raise IdentityMismatchError(f"point {i!r} has mismatched frame counts")
        sq.append(((p - gt_pts) ** 2).sum(axis=1))
    return float(np.sqrt(np.mean(np.concatenate(sq))))


# ---------------------------------------------------------------------------
# Direction accuracy


def mask_centroid(mask: np.ndarray) -> np.ndarray:
    """(h, w) centroid of a boolean mask; raises EmptyMaskError if empty."""
    pts = np.argwhere(mask)
    if len(pts) == 0:
        raise EmptyMaskError("mask has no pixels")
    return pts.mean(axis=0)


def direction_correct(displacement: np.ndarray, drag: Drag) -> bool:
    """True when the displacement has positive dot product with v^N - u."""
    vec = np.asarray(drag.terminus, dtype=float) - np.asarray(drag.origin, dtype=float)
    return float(np.dot(np.asarray(displacement, dtype=float), vec)) > 0.0


@dataclass
class DirectionCase:
    """One (sample, drag) pair: the dragged part's first/last masks."""

    first_mask: np.ndarray
    last_mask: np.ndarray
    drag: Drag


def direction_accuracy(cases: Sequence[DirectionCase]) -> float:
    """Fraction of cases whose part displacement agrees with the drag.

    Part displacement is the centroid shift between the first and last
    frame masks.  Empty masks raise EmptyMaskError.
    """
    if not cases:
        raise ValueError("no direction cases")
    correct = 0
    for case in cases:
        disp = mask_centroid(case.last_mask) - mask_centroid(case.first_mask)
        correct += direction_correct(disp, case.drag)
    return correct / len(cases)


def estimate_part_masks(
    video: Video, part_colors: dict[int, np.ndarray], background: np.ndarray
) -> np.ndarray:
    """Nearest-color part segmentation of a generated toy video.

    Returns (N, H, W) int masks with -1 for background.  Scenes are flat
    colored, so nearest-reference-color assignment is a faithful stand-in
    for a tracker at toy scale.
    """
    ids = sorted(part_colors)
    palette = np.stack([np.asarray(background)] + [np.asarray(part_colors[j]) for j in ids])
    rgb01 = (video.frames + 1.0) / 2.0
    dists = ((rgb01[..., None, :] - palette[None, None, None]) ** 2).sum(axis=-1)
    nearest = dists.argmin(axis=-1)
    lookup = np.array([-1] + ids)
    return lookup[nearest]
