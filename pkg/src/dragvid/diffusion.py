"""Noising schedule, training objective, and guided ancestral sampling.

The default schedule is a discrete cosine alpha-bar curve with its
endpoints pinned exactly to 1 and 0.  A continuous variant draws
log sigma ~ N(0.7, 1.6^2) and maps it through alpha_bar = 1 / (1 + sigma^2).

Sampling is DDPM-style ancestral denoising over S uniformly spaced
schedule points with a per-frame, linearly increasing classifier-free
guidance weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .attention import ShapeError
from .denoiser import DenoiserState, encode_for_levels, predict_noise
from .types import DragSet, Video, ValidationError, validate_drag_set

LOG_SNR_CLAMP = 20.0


@dataclass(frozen=True)
class NoiseSchedule:
    """Either a discrete alpha-bar table or a continuous log-sigma law."""

    mode: str  # "discrete" | "continuous"
    alpha_bars: np.ndarray | None = None  # (T+1,), alpha_bars[0]=1, alpha_bars[T]=0
    logsigma_mean: float = 0.7
    logsigma_std: float = 1.6

    def __post_init__(self) -> None:
        if self.mode not in ("discrete", "continuous"):
            raise ValidationError(f"unknown schedule mode {self.mode!r}")
        if self.mode == "discrete":
            ab = self.alpha_bars
            if ab is None or ab.ndim != 1 or len(ab) < 2:
                raise ValidationError("discrete schedule needs an alpha-bar table")
            if ab[0] != 1.0 or ab[-1] != 0.0:
                raise ValidationError("alpha-bar table must run from exactly 1 to exactly 0")
            if not np.all(np.diff(ab) < 0):
                raise ValidationError("alpha-bar table must be strictly decreasing")

    @staticmethod
    def cosine(steps: int = 1000, offset: float = 0.008) -> "NoiseSchedule":
        t = np.linspace(0.0, 1.0, steps + 1)
        f = np.cos((t + offset) / (1.0 + offset) * math.pi / 2.0) ** 2
        ab = f / f[0]
        ab[0], ab[-1] = 1.0, 0.0
        return NoiseSchedule(mode="discrete", alpha_bars=ab)

    @staticmethod
    def continuous(mean: float = 0.7, std: float = 1.6) -> "NoiseSchedule":
        return NoiseSchedule(mode="continuous", logsigma_mean=mean, logsigma_std=std)

    @property
    def steps(self) -> int:
        if self.mode != "discrete":
            raise ValidationError("continuous schedules have no step count")
        return len(self.alpha_bars) - 1

    def alpha_bar(self, t: int) -> float:
        if self.mode != "discrete":
            raise ValidationError("alpha_bar(t) is defined for discrete schedules only")
        return float(self.alpha_bars[t])

    def sample_level(self, rng: np.random.Generator) -> float:
        """Draw one training noise level, returned as alpha-bar."""
        if self.mode == "discrete":
            t = int(rng.integers(1, self.steps + 1))
            return float(self.alpha_bars[t])
        sigma = math.exp(rng.normal(self.logsigma_mean, self.logsigma_std))
        return 1.0 / (1.0 + sigma * sigma)

    def sampling_alpha_bars(self, steps: int) -> np.ndarray:
        """Alpha-bar grid for an S-step sampler, index 0 (data) .. S (noise)."""
        if steps < 1:
            raise ValidationError("sampler needs at least 1 step")
        if self.mode == "discrete":
            taus = np.round(np.linspace(0, self.steps, steps + 1)).astype(int)
            if len(np.unique(taus)) != len(taus):
                raise ValidationError(f"{steps} sampler steps exceed the schedule length")
            return self.alpha_bars[taus]
        if steps == 1:
            return np.array([1.0, 0.0])
        sig_min = math.exp(self.logsigma_mean - 3.0 * self.logsigma_std)
        sig_max = math.exp(self.logsigma_mean + 3.0 * self.logsigma_std)
        sigmas = np.geomspace(sig_min, sig_max, steps - 1)
        interior = 1.0 / (1.0 + sigmas**2)  # descending in alpha-bar
        return np.concatenate([[1.0], interior, [0.0]])


def log_snr(alpha_bar: float) -> float:
    """log(alpha_bar / (1 - alpha_bar)), clamped to +-20; the network's t input."""
    if alpha_bar >= 1.0:
        return LOG_SNR_CLAMP
    if alpha_bar <= 0.0:
        return -LOG_SNR_CLAMP
    lam = math.log(alpha_bar) - math.log1p(-alpha_bar)
    return max(-LOG_SNR_CLAMP, min(LOG_SNR_CLAMP, lam))


def add_noise(z0, alpha_bar: float, eps):
    """sqrt(alpha_bar) * z0 + sqrt(1 - alpha_bar) * eps; numpy or torch."""
    if not 0.0 <= alpha_bar <= 1.0:
        raise ValidationError(f"alpha_bar must lie in [0, 1], got {alpha_bar}")
    if tuple(z0.shape) != tuple(eps.shape):
        raise ShapeError(f"z0 shape {tuple(z0.shape)} != eps shape {tuple(eps.shape)}")
    return math.sqrt(alpha_bar) * z0 + math.sqrt(1.0 - alpha_bar) * eps


def guidance_weights(frame_count: int, w_max: float, w_min: float = 1.0) -> np.ndarray:
    """Per-frame CFG weights rising linearly from w_min to w_max."""
    if frame_count == 1:
        return np.array([w_max])
    steps = np.arange(frame_count) / (frame_count - 1)
    return w_min + (w_max - w_min) * steps


def cfg_combine(eps_cond, eps_uncond, weights):
    """Per-frame combination eps_uncond + w_n * (eps_cond - eps_uncond).

    Inputs are (B, N, ...) with one weight per frame.
    """
    if tuple(eps_cond.shape) != tuple(eps_uncond.shape):
        raise ShapeError(
            f"prediction shapes disagree: {tuple(eps_cond.shape)} vs {tuple(eps_uncond.shape)}"
        )
    n = eps_cond.shape[1]
    if len(weights) != n:
        raise ShapeError(f"got {len(weights)} guidance weights for {n} frames")
    if isinstance(eps_cond, torch.Tensor):
        w = torch.as_tensor(
            np.asarray(weights), dtype=eps_cond.dtype, device=eps_cond.device
        ).view(1, n, *([1] * (eps_cond.ndim - 2)))
    else:
        w = np.asarray(weights).reshape(1, n, *([1] * (eps_cond.ndim - 2)))
    return eps_uncond + w * (eps_cond - eps_uncond)


def training_loss(
    batch: tuple[torch.Tensor, torch.Tensor, Sequence[DragSet]],
    state: DenoiserState,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    drop_prob: float = 0.1,
    eps: torch.Tensor | None = None,
    alpha_bars: Sequence[float] | None = None,
) -> torch.Tensor:
    """Mean squared error between sampled noise and the network prediction.

    With probability ``drop_prob`` per item the drag set is replaced by the
    empty set (the unconditional branch).  ``eps`` and ``alpha_bars``
    override the random draws; tests use them to pin the noise.
    """
    videos, refs, drag_sets = batch
    b = videos.shape[0]
    if alpha_bars is None:
        alpha_bars = [schedule.sample_level(rng) for _ in range(b)]
    if eps is None:
        eps = torch.as_tensor(
            rng.standard_normal(tuple(videos.shape)), dtype=videos.dtype
        )
    dropped = []
    for ds in drag_sets:
        drop = drop_prob >= 1.0 or (drop_prob > 0.0 and rng.random() < drop_prob)
        dropped.append(DragSet(drags=(), k_max=ds.k_max) if drop else ds)

    ab = torch.as_tensor(np.asarray(alpha_bars), dtype=videos.dtype)
    shaped = ab.view(b, *([1] * (videos.ndim - 1)))
    z_t = torch.sqrt(shaped) * videos + torch.sqrt(1.0 - shaped) * eps
    lam = torch.as_tensor([log_snr(a) for a in alpha_bars], dtype=videos.dtype)
    pred = predict_noise(z_t, lam, refs, dropped, state)
    loss = torch.mean((eps - pred) ** 2)
    if not torch.isfinite(loss):
        raise ValidationError("training loss is non-finite; the run has diverged")
    return loss


def sample(
    y: np.ndarray,
    drags: DragSet,
    state: DenoiserState,
    steps: int,
    w_max: float,
    schedule: NoiseSchedule | None = None,
    w_min: float = 1.0,
    seed: int = 0,
    use_ema: bool = True,
) -> Video:
    """Generate one video by guided ancestral denoising from pure noise.

    Returns frames clipped to [-1, 1].  Deterministic given the seed.
    """
    cfg = state.config
    if schedule is None:
        schedule = NoiseSchedule.cosine()
    validate_drag_set(drags, cfg.resolution, cfg.frame_count)
    model = state.ema_model() if use_ema else state.model
    model.eval()

    rng = np.random.default_rng(seed)
    n, c, h, w = cfg.frame_count, cfg.channels, cfg.height, cfg.width
    z = torch.as_tensor(rng.standard_normal((1, n, c, h, w)), dtype=torch.float32)
    y_t = torch.as_tensor(np.asarray(y, dtype=np.float32)).permute(2, 0, 1).unsqueeze(0)
    weights = guidance_weights(n, w_max, w_min)

    enc_cond = encode_for_levels([drags], cfg, z.device, z.dtype)
    empty = DragSet(drags=(), k_max=cfg.k_max)
    enc_uncond = encode_for_levels([empty], cfg, z.device, z.dtype)

    abars = schedule.sampling_alpha_bars(steps)
    with torch.no_grad():
        for i in range(steps, 0, -1):
            ab_hi, ab_lo = float(abars[i]), float(abars[i - 1])
            lam = torch.as_tensor([log_snr(ab_hi)], dtype=z.dtype)
            eps_c = model(z, lam, y_t, [drags], enc_cond)
            if drags.count > 0:
                eps_u = model(z, lam, y_t, [empty], enc_uncond)
                eps_hat = cfg_combine(eps_c, eps_u, weights)
            else:
                eps_hat = eps_c
            if not torch.isfinite(eps_hat).all():
                raise ValidationError("sampler produced non-finite predictions")

            # x0 estimate; at alpha_bar = 0 there is no signal to rescale, so
            # the raw prediction gap stands in (guarded denominator of 1).
            denom = math.sqrt(ab_hi) if ab_hi > 0.0 else 1.0
            x0 = ((z - math.sqrt(1.0 - ab_hi) * eps_hat) / denom).clamp(-1.0, 1.0)

            ratio = ab_hi / ab_lo
            coef_x0 = math.sqrt(ab_lo) * (1.0 - ratio) / (1.0 - ab_hi)
            coef_z = math.sqrt(ratio) * (1.0 - ab_lo) / (1.0 - ab_hi)
            var = (1.0 - ratio) * (1.0 - ab_lo) / (1.0 - ab_hi)
            z = coef_x0 * x0 + coef_z * z
            if var > 0.0:
                noise = torch.as_tensor(
                    rng.standard_normal(tuple(z.shape)), dtype=z.dtype
                )
                z = z + math.sqrt(var) * noise

    frames = z.clamp(-1.0, 1.0).squeeze(0).permute(0, 2, 3, 1).numpy()
    return Video(frames=frames)
