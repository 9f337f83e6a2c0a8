"""Spatial attention variants over per-frame token grids.

``all_to_first`` is the drop-in replacement for spatial self-attention in
the video denoiser: every frame's queries attend only to the keys and
values of the first (reference) frame.  ``per_frame_self_attention`` is
the ordinary per-frame variant kept for the ablation config.

Both take Q, K, V of shape (B, N, s, s, C) and return the same shape.
They are pure, differentiable functions.  The default path uses the fused
kernel; ``return_weights=True`` switches to an explicit softmax with
per-row max subtraction and also returns the attention weights.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F


class ShapeError(ValueError):
    """Attention inputs disagree in shape or channel/head layout."""


def _check_inputs(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int) -> None:
    if q.ndim != 5:
        raise ShapeError(f"expected (B, N, s, s, C) tensors, got {tuple(q.shape)}")
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(
            f"Q/K/V shapes disagree: {tuple(q.shape)}, {tuple(k.shape)}, {tuple(v.shape)}"
        )
    if q.shape[-1] % heads:
        raise ShapeError(f"channels {q.shape[-1]} not divisible by {heads} heads")


def _to_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    # (B, L, C) -> (B, heads, L, D)
    b, l, c = x.shape
    return x.view(b, l, heads, c // heads).transpose(1, 2)


def _from_heads(x: torch.Tensor) -> torch.Tensor:
    b, heads, l, d = x.shape
    return x.transpose(1, 2).reshape(b, l, heads * d)


def scaled_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int, need_weights: bool = False
):
    """Softmax attention for (B, L, C) tokens; returns output and weights.

    Weights are materialized only when requested; otherwise the fused
    kernel runs and ``None`` is returned in their place.
    """
    qh, kh, vh = _to_heads(q, heads), _to_heads(k, heads), _to_heads(v, heads)
    if not need_weights:
        return _from_heads(F.scaled_dot_product_attention(qh, kh, vh)), None
    d = qh.shape[-1]
    logits = qh @ kh.transpose(-2, -1) / math.sqrt(d)
    logits = logits - logits.amax(dim=-1, keepdim=True)
    weights = torch.softmax(logits, dim=-1)
    return _from_heads(weights @ vh), weights


def all_to_first(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    heads: int = 1,
    return_weights: bool = False,
):
    """Every frame attends to the first frame's keys and values.

    Keys and values of frames 1..N-1 are ignored by contract.  For frame 0
    this coincides with ordinary spatial self-attention of that frame.
    """
    _check_inputs(q, k, v, heads)
    b, n, s1, s2, c = q.shape
    l = s1 * s2
    d = c // heads
    k0 = k[:, 0].reshape(b, l, heads, d).transpose(1, 2)
    v0 = v[:, 0].reshape(b, l, heads, d).transpose(1, 2)
    if not return_weights:
        qh = q.reshape(b, n * l, heads, d).transpose(1, 2)
        out = F.scaled_dot_product_attention(qh, k0, v0)
        return out.transpose(1, 2).reshape(b, n, s1, s2, c)
    q_flat = q.reshape(b * n, l, c)
    k0 = k[:, 0].reshape(b, l, c).repeat_interleave(n, dim=0)
    v0 = v[:, 0].reshape(b, l, c).repeat_interleave(n, dim=0)
    out, weights = scaled_attention(q_flat, k0, v0, heads, need_weights=True)
    return out.view(b, n, s1, s2, c), weights.view(b, n, heads, l, l)


def per_frame_self_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    heads: int = 1,
    return_weights: bool = False,
):
    """Standard softmax attention within each frame independently."""
    _check_inputs(q, k, v, heads)
    b, n, s1, s2, c = q.shape
    l = s1 * s2
    out, weights = scaled_attention(
        q.reshape(b * n, l, c),
        k.reshape(b * n, l, c),
        v.reshape(b * n, l, c),
        heads,
        need_weights=return_weights,
    )
    out = out.view(b, n, s1, s2, c)
    if return_weights:
        return out, weights.view(b, n, heads, l, l)
    return out
