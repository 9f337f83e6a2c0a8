"""Injection of the drag signal into denoiser features.

Two routes: adaptive-norm modulation (scale/shift regressed from the drag
encoding by a small conv stack) and drag tokens (key/value pairs regressed
by MLPs from drag coordinates plus features sampled at those locations)
concatenated into cross-attention after the reference token.

Every head that produces drag-dependent signal has a zero-initialized
final layer, so at initialization the whole conditioning path is inert:
modulation is the identity and drag tokens are exact zeros.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .attention import ShapeError
from .encoding import CHANNELS_PER_DRAG
from .types import DragSet, Resolution


def modulate(features: torch.Tensor, scale: torch.Tensor, shift: torch.Tensor) -> torch.Tensor:
    """Elementwise f * (1 + scale) + shift."""
    if features.shape != scale.shape or features.shape != shift.shape:
        raise ShapeError(
            f"modulation shapes disagree: f {tuple(features.shape)}, "
            f"scale {tuple(scale.shape)}, shift {tuple(shift.shape)}"
        )
    return features * (1.0 + scale) + shift


class EncodingEmbedder(nn.Module):
    """Embeds a drag-encoding tensor into per-pixel scale and shift maps.

    The final convolution is zero-initialized, so the output is exactly
    zero for any input at initialization.
    """

    def __init__(self, k_max: int, width: int):
        super().__init__()
        self.width = width
        self.conv_in = nn.Conv2d(CHANNELS_PER_DRAG * k_max, width, 3, padding=1)
        self.act = nn.SiLU()
        self.conv_out = nn.Conv2d(width, 2 * width, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, enc: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """enc: (B, N, s, s, 6*k_max) -> scale, shift each (B, N, s, s, width)."""
        if enc.ndim != 5:
            raise ShapeError(f"expected (B, N, s, s, c*k_max) encoding, got {tuple(enc.shape)}")
        b, n, s1, s2, _ = enc.shape
        x = enc.reshape(b * n, s1, s2, -1).permute(0, 3, 1, 2)
        x = self.conv_out(self.act(self.conv_in(x)))
        x = x.permute(0, 2, 3, 1).reshape(b, n, s1, s2, 2 * self.width)
        return x[..., : self.width], x[..., self.width :]


def bilinear_sample(fmap: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample a (B, s1, s2, C) map at fractional grid positions.

    ``positions`` is (B, P, 2) in grid units where cell (i, j) sits at
    position (i, j); integer positions return that cell's vector exactly.
    Positions are clamped to the grid.
    """
    b, s1, s2, c = fmap.shape
    gh = positions[..., 0].clamp(0.0, s1 - 1.0)
    gw = positions[..., 1].clamp(0.0, s2 - 1.0)
    h0 = gh.floor().long().clamp(0, s1 - 2) if s1 > 1 else gh.long() * 0
    w0 = gw.floor().long().clamp(0, s2 - 2) if s2 > 1 else gw.long() * 0
    h1 = (h0 + 1).clamp(max=s1 - 1)
    w1 = (w0 + 1).clamp(max=s2 - 1)
    ah = (gh - h0.to(gh.dtype)).unsqueeze(-1)
    aw = (gw - w0.to(gw.dtype)).unsqueeze(-1)

    flat = fmap.reshape(b, s1 * s2, c)
    batch = torch.arange(b, device=fmap.device).unsqueeze(-1)

    def gather(hi, wi):
        return flat[batch, hi * s2 + wi]

    top = gather(h0, w0) * (1 - aw) + gather(h0, w1) * aw
    bottom = gather(h1, w0) * (1 - aw) + gather(h1, w1) * aw
    return top * (1 - ah) + bottom * ah


@dataclass
class DragTokenBank:
    """Per-frame key/value pairs for up to k_max drag slots.

    Unoccupied slots hold exact zeros and a False mask entry.
    """

    keys: torch.Tensor  # (B, N, k_max, C)
    values: torch.Tensor  # (B, N, k_max, C)
    mask: torch.Tensor  # (B, k_max) bool


class DragTokenRegressor(nn.Module):
    """MLPs regressing one key and one value vector per occupied drag.

    Input per drag and frame: normalized (h/H, w/W) coordinates of the
    origin, current and final locations, concatenated with features
    sampled at those three locations.  Two hidden layers of width
    4*C; output projections are zero-initialized.
    """

    def __init__(self, width: int):
        super().__init__()
        self.width = width
        in_dim = 6 + 3 * width
        self.key_mlp = self._mlp(in_dim, width)
        self.value_mlp = self._mlp(in_dim, width)

    @staticmethod
    def _mlp(in_dim: int, width: int) -> nn.Sequential:
        hidden = 4 * width
        out = nn.Linear(hidden, width)
        nn.init.zeros_(out.weight)
        nn.init.zeros_(out.bias)
        return nn.Sequential(
            nn.Linear(in_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden), nn.SiLU(), out
        )

    def forward(
        self, coords: torch.Tensor, feats: torch.Tensor, mask: torch.Tensor
    ) -> DragTokenBank:
        """coords (B, N, K, 6), feats (B, N, K, 3C), mask (B, K) -> bank."""
        x = torch.cat([coords, feats], dim=-1)
        gate = mask.to(x.dtype)[:, None, :, None]
        keys = self.key_mlp(x) * gate
        values = self.value_mlp(x) * gate
        return DragTokenBank(keys=keys, values=values, mask=mask)


def drag_coordinate_inputs(
    drag_sets: Sequence[DragSet],
    res: Resolution,
    frame_count: int,
    k_max: int,
    device,
    dtype=torch.float32,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Normalized MLP coordinate inputs (B, N, k_max, 6) and mask (B, k_max).

    Coordinates are divided by H and W, so jointly rescaling resolution and
    pixel coordinates leaves the result unchanged.
    """
    b = len(drag_sets)
    coords = np.zeros((b, frame_count, k_max, 6), dtype=np.float32)
    mask = np.zeros((b, k_max), dtype=bool)
    for i, drags in enumerate(drag_sets):
        for k, drag in enumerate(drags):
            if k >= k_max:
                break
            traj = drag.as_array().astype(np.float64)
            u = traj[0]
            v_final = traj[-1]
            for n in range(frame_count):
                coords[i, n, k, 0:2] = (u[0] / res.height, u[1] / res.width)
                coords[i, n, k, 2:4] = (traj[n][0] / res.height, traj[n][1] / res.width)
                coords[i, n, k, 4:6] = (v_final[0] / res.height, v_final[1] / res.width)
            mask[i, k] = True
    return (
        torch.as_tensor(coords, device=device, dtype=dtype),
        torch.as_tensor(mask, device=device),
    )


def make_drag_tokens(
    drag_sets: Sequence[DragSet],
    features: torch.Tensor,
    res: Resolution,
    regressor: DragTokenRegressor,
    k_max: int,
) -> DragTokenBank:
    """Build the drag-token bank from a (B, N, s1, s2, C) feature map.

    Features are sampled bilinearly at the drag's origin, per-frame and
    final locations on the current block's grid; the current location is
    sampled per frame.
    """
    b, n, s1, s2, c = features.shape
    coords, mask = drag_coordinate_inputs(
        drag_sets, res, n, k_max, features.device, features.dtype
    )
    # Map normalized coordinates onto this block's grid: pixel h -> h * s / H.
    grid = coords.reshape(b, n, k_max * 3, 2).clone()
    grid[..., 0] *= s1
    grid[..., 1] *= s2
    fmap = features.reshape(b * n, s1, s2, c)
    sampled = bilinear_sample(fmap, grid.reshape(b * n, k_max * 3, 2))
    sampled = sampled.reshape(b, n, k_max, 3 * c)
    return regressor(coords, sampled, mask)


def conditioned_cross_attention(
    features: torch.Tensor,
    ref_key: torch.Tensor,
    ref_value: torch.Tensor,
    bank: DragTokenBank,
    return_weights: bool = False,
):
    """Attend each feature token over 1 + k_max key-value pairs.

    The reference token comes first, then the drag slots; zero pairs from
    empty slots participate in the softmax literally, absorbing attention
    mass.  Single-head.
    """
    if features.ndim != 5:
        raise ShapeError(f"expected (B, N, s, s, C) features, got {tuple(features.shape)}")
    b, n, s1, s2, c = features.shape
    if ref_key.shape[-1] != c or ref_value.shape[-1] != c:
        raise ShapeError(
            f"reference token width {ref_key.shape[-1]} does not match features ({c})"
        )
    if ref_key.ndim == 2:
        ref_key = ref_key[:, None, :].expand(b, n, c)
        ref_value = ref_value[:, None, :].expand(b, n, c)
    if ref_key.shape != (b, n, c) or ref_value.shape != (b, n, c):
        raise ShapeError(
            f"reference token shape {tuple(ref_key.shape)} does not match features"
        )
    keys = torch.cat([ref_key.unsqueeze(2), bank.keys], dim=2)  # (B, N, 1+K, C)
    values = torch.cat([ref_value.unsqueeze(2), bank.values], dim=2)
    q = features.reshape(b, n, s1 * s2, c)
    logits = q @ keys.transpose(-2, -1) / (c**0.5)
    logits = logits - logits.amax(dim=-1, keepdim=True)
    weights = torch.softmax(logits, dim=-1)
    out = (weights @ values).reshape(b, n, s1, s2, c)
    if return_weights:
        return out, weights
    return out
