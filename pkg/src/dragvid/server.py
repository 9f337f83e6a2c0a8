"""HTTP generation service for the drag-studio UI.

POST /generate runs guided sampling with EMA weights behind a bounded
FIFO queue (one model instance, serialized inference).  GET /samples and
GET /samples/{id} expose dataset reference frames for the UI picker.
"""

from __future__ import annotations

import threading
import time
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from . import diffusion, images, toyworld
from .denoiser import DenoiserState
from .train import make_schedule
from .types import Drag, DragSet, RunConfig, ValidationError, validate_drag_set


class DragPayload(BaseModel):
    points: list[list[int]] | None = None
    origin: list[int] | None = None
    terminus: list[int] | None = None


class GenerateRequest(BaseModel):
    reference_b64: str | None = None
    sample_id: str | None = None
    drags: list[DragPayload] = []
    steps: int | None = None
    guidance_max: float | None = None
    seed: int = 0
    use_ema: bool = True


def interpolate_straight(origin, terminus, frame_count: int) -> list[tuple[int, int]]:
    """Linear pixel interpolation of a straight drag over N frames."""
    o = np.asarray(origin, dtype=float)
    t = np.asarray(terminus, dtype=float)
    alphas = np.linspace(0.0, 1.0, frame_count)
    pts = np.rint(o[None, :] + alphas[:, None] * (t - o)[None, :]).astype(int)
    pts[0] = np.asarray(origin, dtype=int)
    return [tuple(p) for p in pts]


def resample_polyline(points: np.ndarray, frame_count: int) -> np.ndarray:
    """Arc-length resampling of an arbitrary polyline to N integer points."""
    pts = np.asarray(points, dtype=float)
    if len(pts) == 1:
        pts = np.repeat(pts, 2, axis=0)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    if cum[-1] == 0.0:
        return np.rint(np.repeat(pts[:1], frame_count, axis=0)).astype(int)
    targets = np.linspace(0.0, cum[-1], frame_count)
    out = np.empty((frame_count, 2))
    for axis in range(2):
        out[:, axis] = np.interp(targets, cum, pts[:, axis])
    return np.rint(out).astype(int)


def build_drag_set(payloads: list[DragPayload], config: RunConfig) -> DragSet:
    """Decode request drags into a validated DragSet."""
    n = config.frame_count
    drags = []
    for i, payload in enumerate(payloads):
        if payload.points is not None and len(payload.points) > 0:
            pts = np.asarray(payload.points, dtype=int)
            if len(pts) != n:
                pts = resample_polyline(pts, n)
            drags.append(Drag.from_points(pts))
        elif payload.origin is not None and payload.terminus is not None:
            drags.append(
                Drag.from_points(interpolate_straight(payload.origin, payload.terminus, n))
            )
        else:
            raise ValidationError(
                f"drag {i}: provide either points or origin plus terminus"
            )
    drag_set = DragSet.of(drags, k_max=config.k_max)
    return validate_drag_set(drag_set, config.resolution, n)


class QueueFullError(RuntimeError):
    pass


@dataclass
class GenerationEngine:
    """One loaded checkpoint plus a bounded inference queue."""

    state: DenoiserState
    config: RunConfig
    dataset_dir: str | None = None
    queue_size: int = 4
    _slots: threading.Semaphore = field(init=False)
    _model_lock: threading.Lock = field(init=False, default_factory=threading.Lock)

    def __post_init__(self) -> None:
        self._slots = threading.Semaphore(self.queue_size)
        self._schedule = make_schedule(self.config)
        self._samples: dict[str, np.ndarray] | None = None

    def resolve_reference(self, req: GenerateRequest) -> np.ndarray:
        if (req.reference_b64 is None) == (req.sample_id is None):
            raise ValidationError("provide exactly one of reference_b64 or sample_id")
        if req.sample_id is not None:
            ref = self.dataset_reference(req.sample_id)
            if ref is None:
                raise ValidationError(f"unknown sample id {req.sample_id!r}")
            return ref
        try:
            frame = images.base64_to_frame(req.reference_b64)
        except Exception as exc:  # noqa: BLE001 - client data
            raise ValidationError(f"reference image does not decode: {exc}") from exc
        if frame.shape[:2] != (self.config.height, self.config.width):
            frame = images.resize_frame(frame, self.config.height, self.config.width)
        return frame

    def sample_ids(self) -> list[str]:
        if self.dataset_dir is None:
            return []
        return toyworld.list_samples(self.dataset_dir)

    def dataset_reference(self, sample_id: str) -> np.ndarray | None:
        if self.dataset_dir is None or sample_id not in self.sample_ids():
            return None
        if self._samples is None:
            self._samples = {}
        if sample_id not in self._samples:
            self._samples[sample_id] = toyworld.load_sample(
                self.dataset_dir, sample_id
            ).video.reference
        return self._samples[sample_id]

    def generate(self, req: GenerateRequest) -> dict:
        if not self._slots.acquire(blocking=False):
            raise QueueFullError(f"generation queue of {self.queue_size} is full")
        try:
            reference = self.resolve_reference(req)
            drags = build_drag_set(req.drags, self.config)
            steps = req.steps or self.config.sampler_steps
            guidance = (
                req.guidance_max if req.guidance_max is not None else self.config.guidance_max
            )
            started = time.time()
            with self._model_lock:
                video = diffusion.sample(
                    reference,
                    drags,
                    self.state,
                    steps=steps,
                    w_max=guidance,
                    w_min=self.config.guidance_min,
                    schedule=self._schedule,
                    seed=req.seed,
                    use_ema=req.use_ema,
                )
            elapsed = time.time() - started
            return {
                "frames": [images.frame_to_base64(f) for f in video.frames],
                "frame_count": video.frame_count,
                "drags": [
                    {"origin": list(d.origin), "points": [list(p) for p in d.trajectory]}
                    for d in drags
                ],
                "timing": {"total_s": elapsed, "steps": steps},
                "seed": req.seed,
            }
        finally:
            self._slots.release()


def create_app(engine: GenerationEngine) -> FastAPI:
    app = FastAPI(title="dragvid generation service")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )

    @app.get("/health")
    def health():
        return {
            "status": "ok",
            "checkpoint_loaded": True,
            "height": engine.config.height,
            "width": engine.config.width,
            "frame_count": engine.config.frame_count,
            "k_max": engine.config.k_max,
        }

    @app.get("/samples")
    def samples():
        out = []
        for sid in engine.sample_ids():
            ref = engine.dataset_reference(sid)
            out.append({"id": sid, "thumbnail_b64": images.frame_to_base64(ref)})
        return {"samples": out}

    @app.get("/samples/{sample_id}")
    def sample_detail(sample_id: str):
        ref = engine.dataset_reference(sample_id)
        if ref is None:
            return JSONResponse(
                status_code=404, content={"detail": f"unknown sample id {sample_id!r}"}
            )
        return {"id": sample_id, "reference_b64": images.frame_to_base64(ref)}

    @app.post("/generate")
    def generate(req: GenerateRequest):
        try:
            return engine.generate(req)
        except QueueFullError as exc:
            return JSONResponse(status_code=503, content={"detail": str(exc)})
        except ValidationError as exc:
            return JSONResponse(status_code=400, content={"detail": str(exc)})
        except Exception:  # noqa: BLE001 - correlation id instead of stack trace
            correlation_id = uuid.uuid4().hex
            import logging

            logging.getLogger("dragvid.server").exception(
                "generation failed, correlation id %s", correlation_id
            )
            return JSONResponse(
                status_code=500,
                content={"detail": "internal error", "correlation_id": correlation_id},
            )

    return app
