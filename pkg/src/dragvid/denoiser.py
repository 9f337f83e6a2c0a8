"""The toy video denoiser.

A small U-shaped network over N frames.  Convolutions run per frame
(frames folded into the batch); each level carries drag modulation,
spatial attention (all-to-first by default, per-frame for the ablation
config), temporal attention across frames, and cross-attention over the
reference token plus drag tokens.

The reference frame is channel-concatenated to every noised frame, and a
small strided conv encoder of the reference provides the cross-attention
reference token.  Pixel space throughout; no VAE.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import conditioning
from .attention import ShapeError, all_to_first, per_frame_self_attention, scaled_attention
from .encoding import CHANNELS_PER_DRAG, EncodingCache, shared_cache
from .types import DragSet, Resolution, RunConfig, ValidationError

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DenoiserConfig:
    """Architecture of the denoiser; resolutions halve per level."""

    height: int = 64
    width: int = 64
    frame_count: int = 8
    channels: int = 3
    level_widths: tuple[int, ...] = (64, 128, 256)
    blocks_per_level: int = 2
    heads: int = 4
    k_max: int = 5
    spatial_attention: str = "all_to_first"
    time_embed_dim: int = 128
    ref_embed_dim: int = 128

    def __post_init__(self) -> None:
        object.__setattr__(self, "level_widths", tuple(int(w) for w in self.level_widths))
        if self.height != self.width:
            raise ValidationError("the denoiser requires a square resolution")
        if list(self.level_widths) != sorted(self.level_widths):
            raise ValidationError("level widths must be nondecreasing with depth")
        down = 2 ** (len(self.level_widths) - 1)
        if self.height % down:
            raise ValidationError(
                f"height {self.height} not divisible by {down} for {self.levels} levels"
            )
        if self.height // down < 4:
            raise ValidationError("bottom level resolution must be at least 4")
        for w in self.level_widths:
            if w % self.heads:
                raise ValidationError(f"width {w} not divisible by {self.heads} heads")
        if self.spatial_attention not in ("all_to_first", "per_frame"):
            raise ValidationError(f"unknown spatial_attention {self.spatial_attention!r}")

    @property
    def levels(self) -> int:
        return len(self.level_widths)

    @property
    def level_resolutions(self) -> tuple[int, ...]:
        return tuple(self.height >> i for i in range(self.levels))

    @property
    def resolution(self) -> Resolution:
        return Resolution(self.height, self.width)

    @staticmethod
    def from_run_config(cfg: RunConfig) -> "DenoiserConfig":
        return DenoiserConfig(
            height=cfg.height,
            width=cfg.width,
            frame_count=cfg.frame_count,
            channels=cfg.channels,
            level_widths=cfg.level_widths,
            blocks_per_level=cfg.blocks_per_level,
            heads=cfg.heads,
            k_max=cfg.k_max,
            spatial_attention=cfg.spatial_attention,
        )


def _num_groups(channels: int) -> int:
    groups = 8
    while channels % groups:
        groups //= 2
    return max(groups, 1)


def sinusoidal_embedding(x: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Standard sin/cos features of a scalar noise level, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=x.dtype, device=x.device) / half
    )
    args = x[:, None] * freqs[None, :] * 10.0
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class TimeEmbedding(nn.Module):
    """Sinusoidal features of the noise level mapped through a 2-layer MLP."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.mlp(sinusoidal_embedding(t, self.dim))


class ReferenceEncoder(nn.Module):
    """4-layer strided conv encoder of the reference frame with global pooling."""

    def __init__(self, channels: int, out_dim: int):
        super().__init__()
        widths = (32, 64, 96, out_dim)
        layers = []
        prev = channels
        for w in widths:
            layers += [nn.Conv2d(prev, w, 3, stride=2, padding=1), nn.SiLU()]
            prev = w
        self.net = nn.Sequential(*layers)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return self.net(y).mean(dim=(2, 3))


class ResBlock(nn.Module):
    """Conv residual block with additive noise-level embedding."""

    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_num_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_num_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(self.act(self.norm1(x)))
        h = h + self.temb_proj(self.act(temb))[:, :, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return h + self.skip(x)


class ConditionedBlock(nn.Module):
    """Per-level attention stack: modulated spatial, temporal, cross.

    Output projections of all three attention paths are zero-initialized,
    so the block starts as the identity.
    """

    def __init__(self, width: int, cfg: DenoiserConfig):
        super().__init__()
        self.width = width
        self.heads = cfg.heads
        self.k_max = cfg.k_max
        self.mode = cfg.spatial_attention
        self.res = cfg.resolution

        self.norm_spatial = nn.GroupNorm(_num_groups(width), width)
        self.embedder = conditioning.EncodingEmbedder(cfg.k_max, width)
        self.sq = nn.Linear(width, width)
        self.sk = nn.Linear(width, width)
        self.sv = nn.Linear(width, width)
        self.spatial_proj = _zero_linear(width)

        self.norm_temporal = nn.GroupNorm(_num_groups(width), width)
        self.frame_pos = nn.Parameter(torch.randn(cfg.frame_count, width) * 0.02)
        self.tq = nn.Linear(width, width)
        self.tk = nn.Linear(width, width)
        self.tv = nn.Linear(width, width)
        self.temporal_proj = _zero_linear(width)

        self.norm_cross = nn.GroupNorm(_num_groups(width), width)
        self.cq = nn.Linear(width, width)
        self.ref_key = nn.Linear(cfg.ref_embed_dim, width)
        self.ref_value = nn.Linear(cfg.ref_embed_dim, width)
        self.tokens = conditioning.DragTokenRegressor(width)
        self.cross_proj = _zero_linear(width)

    def _norm_cl(self, norm: nn.GroupNorm, x: torch.Tensor, b: int, n: int) -> torch.Tensor:
        # (B*N, C, s, s) -> normalized channels-last (B, N, s, s, C)
        h = norm(x)
        _, c, s1, s2 = h.shape
        return h.view(b, n, c, s1, s2).permute(0, 1, 3, 4, 2)

    def forward(
        self,
        x: torch.Tensor,
        b: int,
        n: int,
        enc: torch.Tensor,
        ref_embed: torch.Tensor,
        drag_sets: Sequence[DragSet],
    ) -> torch.Tensor:
        _, c, s1, s2 = x.shape

        # Spatial attention over drag-modulated, normalized features.
        h = self._norm_cl(self.norm_spatial, x, b, n)
        scale, shift = self.embedder(enc)
        h = conditioning.modulate(h, scale, shift)
        attend = all_to_first if self.mode == "all_to_first" else per_frame_self_attention
        attn = attend(self.sq(h), self.sk(h), self.sv(h), heads=self.heads)
        x = x + self._cl_to_bn(self.spatial_proj(attn))

        # Temporal attention across the N frames at each spatial location.
        h = self._norm_cl(self.norm_temporal, x, b, n)
        tokens = h.permute(0, 2, 3, 1, 4).reshape(b * s1 * s2, n, c)
        tokens = tokens + self.frame_pos[None, :n, :]
        out, _ = scaled_attention(
            self.tq(tokens), self.tk(tokens), self.tv(tokens), self.heads
        )
        out = out.view(b, s1, s2, n, c).permute(0, 3, 1, 2, 4)
        x = x + self._cl_to_bn(self.temporal_proj(out))

        # Cross-attention over the reference token plus drag tokens; drag
        # tokens sample this block's features just before the attention.
        h = self._norm_cl(self.norm_cross, x, b, n)
        bank = conditioning.make_drag_tokens(drag_sets, h, self.res, self.tokens, self.k_max)
        out = conditioning.conditioned_cross_attention(
            self.cq(h), self.ref_key(ref_embed), self.ref_value(ref_embed), bank
        )
        x = x + self._cl_to_bn(self.cross_proj(out))
        return x

    @staticmethod
    def _cl_to_bn(h: torch.Tensor) -> torch.Tensor:
        b, n, s1, s2, c = h.shape
        return h.permute(0, 1, 4, 2, 3).reshape(b * n, c, s1, s2)


def _zero_linear(width: int) -> nn.Linear:
    lin = nn.Linear(width, width)
    nn.init.zeros_(lin.weight)
    nn.init.zeros_(lin.bias)
    return lin


class _DownLevel(nn.Module):
    def __init__(self, in_ch: int, width: int, next_width: int | None, cfg: DenoiserConfig):
        super().__init__()
        blocks = [ResBlock(in_ch, width, cfg.time_embed_dim)]
        blocks += [
            ResBlock(width, width, cfg.time_embed_dim) for _ in range(cfg.blocks_per_level - 1)
        ]
        self.res_blocks = nn.ModuleList(blocks)
        self.cond = ConditionedBlock(width, cfg)
        self.down = (
            nn.Conv2d(width, next_width, 3, stride=2, padding=1) if next_width else None
        )


class _UpLevel(nn.Module):
    def __init__(self, above_ch: int, width: int, cfg: DenoiserConfig):
        super().__init__()
        self.up_conv = nn.Conv2d(above_ch, width, 3, padding=1)
        blocks = [ResBlock(2 * width, width, cfg.time_embed_dim)]
        blocks += [
            ResBlock(width, width, cfg.time_embed_dim) for _ in range(cfg.blocks_per_level - 1)
        ]
        self.res_blocks = nn.ModuleList(blocks)
        self.cond = ConditionedBlock(width, cfg)


class DragVideoDenoiser(nn.Module):
    """U-shaped noise predictor over N frames with drag conditioning."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        widths = config.level_widths
        self.time_embed = TimeEmbedding(config.time_embed_dim)
        # Learned frame-index embedding, added to the noise-level embedding in
        # every residual block so frames are distinguishable even with no drags.
        self.frame_embed = nn.Parameter(
            sinusoidal_embedding(
                torch.arange(config.frame_count, dtype=torch.float32),
                config.time_embed_dim,
            )
        )
        self.ref_encoder = ReferenceEncoder(config.channels, config.ref_embed_dim)
        self.stem = nn.Conv2d(2 * config.channels, widths[0], 3, padding=1)

        self.down_levels = nn.ModuleList()
        for i, w in enumerate(widths):
            in_ch = widths[0] if i == 0 else widths[i]
            next_w = widths[i + 1] if i + 1 < len(widths) else None
            self.down_levels.append(_DownLevel(in_ch, w, next_w, config))

        self.up_levels = nn.ModuleList(
            _UpLevel(widths[i + 1], widths[i], config) for i in reversed(range(len(widths) - 1))
        )

        self.head_norm = nn.GroupNorm(_num_groups(widths[0]), widths[0])
        self.head = nn.Conv2d(widths[0], config.channels, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.act = nn.SiLU()

    def forward(
        self,
        z: torch.Tensor,
        t: torch.Tensor,
        y: torch.Tensor,
        drag_sets: Sequence[DragSet],
        encodings: dict[int, torch.Tensor],
    ) -> torch.Tensor:
        cfg = self.config
        if z.ndim != 5 or z.shape[1] != cfg.frame_count or z.shape[2] != cfg.channels:
            raise ShapeError(
                f"expected (B, {cfg.frame_count}, {cfg.channels}, {cfg.height}, "
                f"{cfg.width}) input, got {tuple(z.shape)}"
            )
        if z.shape[3] != cfg.height or z.shape[4] != cfg.width:
            raise ShapeError(f"input resolution {tuple(z.shape[3:])} does not match config")
        if not torch.isfinite(z).all():
            raise ValidationError("denoiser input contains non-finite values")
        b, n = z.shape[0], z.shape[1]
        if len(drag_sets) != b:
            raise ShapeError(f"got {len(drag_sets)} drag sets for batch of {b}")

        temb = self.time_embed(t)
        temb_bn = temb.repeat_interleave(n, dim=0) + self.frame_embed.repeat(b, 1)
        ref_embed = self.ref_encoder(y)
        y_rep = y.unsqueeze(1).expand(b, n, cfg.channels, cfg.height, cfg.width)
        x = torch.cat([z, y_rep], dim=2).reshape(b * n, 2 * cfg.channels, cfg.height, cfg.width)
        x = self.stem(x)

        skips = []
        for level in self.down_levels:
            for rb in level.res_blocks:
                x = rb(x, temb_bn)
            s = x.shape[-1]
            x = level.cond(x, b, n, encodings[s], ref_embed, drag_sets)
            skips.append(x)
            if level.down is not None:
                x = level.down(x)

        x = skips.pop()
        for level in self.up_levels:
            x = nn.functional.interpolate(x, scale_factor=2, mode="nearest")
            x = level.up_conv(x)
            x = torch.cat([x, skips.pop()], dim=1)
            for rb in level.res_blocks:
                x = rb(x, temb_bn)
            s = x.shape[-1]
            x = level.cond(x, b, n, encodings[s], ref_embed, drag_sets)

        out = self.head(self.act(self.head_norm(x)))
        return out.reshape(b, n, cfg.channels, cfg.height, cfg.width)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def encode_for_levels(
    drag_sets: Sequence[DragSet],
    config: DenoiserConfig,
    device,
    dtype=torch.float32,
    cache: EncodingCache | None = None,
) -> dict[int, torch.Tensor]:
    """Stack cached per-item drag encodings for every level resolution."""
    cache = cache if cache is not None else shared_cache
    res = config.resolution
    out: dict[int, torch.Tensor] = {}
    for s in config.level_resolutions:
        per_item = [
            cache.get(ds, s, res, config.frame_count).tensor for ds in drag_sets
        ]
        out[s] = torch.as_tensor(np.stack(per_item), device=device, dtype=dtype)
    return out


@dataclass
class DenoiserState:
    """Live parameters plus the EMA shadow copy."""

    config: DenoiserConfig
    model: DragVideoDenoiser
    ema: dict[str, torch.Tensor]

    @staticmethod
    def create(config: DenoiserConfig, seed: int = 0) -> "DenoiserState":
        torch.manual_seed(seed)
        model = DragVideoDenoiser(config)
        ema = {k: v.detach().clone() for k, v in model.named_parameters()}
        return DenoiserState(config=config, model=model, ema=ema)

    def ema_model(self) -> DragVideoDenoiser:
        model = DragVideoDenoiser(self.config)
        model.load_state_dict(self.model.state_dict())
        with torch.no_grad():
            for name, param in model.named_parameters():
                param.copy_(self.ema[name])
        model.eval()
        return model

    def parameter_count(self) -> int:
        return self.model.parameter_count()


def ema_update(state: DenoiserState, decay: float) -> DenoiserState:
    """shadow <- decay * shadow + (1 - decay) * live, per tensor."""
    if not 0.0 < decay < 1.0:
        raise ValidationError(f"EMA decay must lie in (0, 1), got {decay}")
    with torch.no_grad():
        for name, param in state.model.named_parameters():
            shadow = state.ema[name]
            if shadow.shape != param.shape:
                raise ShapeError(
                    f"EMA shadow {name} has shape {tuple(shadow.shape)}, "
                    f"live is {tuple(param.shape)}"
                )
            shadow.mul_(decay).add_(param, alpha=1.0 - decay)
    return state


def predict_noise(
    z_t: torch.Tensor,
    t: torch.Tensor,
    y: torch.Tensor,
    drag_sets: Sequence[DragSet],
    state: DenoiserState,
    use_ema: bool = False,
    encodings: dict[int, torch.Tensor] | None = None,
) -> torch.Tensor:
    """Run the denoiser; deterministic given inputs and parameters."""
    model = state.ema_model() if use_ema else state.model
    if z_t.ndim != 5 or len(drag_sets) != z_t.shape[0]:
        raise ShapeError(
            f"got {len(drag_sets)} drag sets for input of shape {tuple(z_t.shape)}"
        )
    if encodings is None:
        encodings = encode_for_levels(drag_sets, state.config, z_t.device, z_t.dtype)
    return model(z_t, t, y, drag_sets, encodings)


def save_checkpoint(state: DenoiserState, path) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "config": dataclasses.asdict(state.config),
            "model": state.model.state_dict(),
            "ema": state.ema,
        },
        path,
    )


class CheckpointError(RuntimeError):
    """A checkpoint file is missing fields or has an unknown version."""


def load_checkpoint(path) -> DenoiserState:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # noqa: BLE001 - surface as a domain error
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    for field in ("format_version", "config", "model", "ema"):
        if field not in payload:
            raise CheckpointError(f"checkpoint {path} is missing field {field!r}")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {payload['format_version']!r}"
        )
    config = DenoiserConfig(**{
        k: tuple(v) if k == "level_widths" else v for k, v in payload["config"].items()
    })
    model = DragVideoDenoiser(config)
    model.load_state_dict(payload["model"])
    return DenoiserState(config=config, model=model, ema=dict(payload["ema"]))
