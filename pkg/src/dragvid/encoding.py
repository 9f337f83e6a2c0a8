"""Hand-crafted multi-resolution drag encoding.

A drag is rasterized onto an ``s x s`` grid per frame using 6 channels:
channels 0:2 mark the origin ``u``, channels 2:4 the current location
``v^n``, channels 4:6 the final location ``v^N``.  A marked cell holds the
fractional offset of the point within the cell; every other cell holds -1.
A drag set concatenates ``k_max`` per-drag encodings along channels,
filling unused slots with -1.

Encodings are pure functions of their inputs and are cached by content
hash: they are reused at every diffusion step.
"""

from __future__ import annotations

import hashlib
import threading
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .types import Coord, Drag, DragSet, Resolution, ValidationError

CHANNELS_PER_DRAG = 6


class MalformedEncodingError(ValueError):
    """An encoding tensor does not satisfy the one-mark-per-group invariant."""


@dataclass(frozen=True)
class DragEncoding:
    """Encoded drag set: tensor of shape (N, s, s, 6 * k_max)."""

    tensor: np.ndarray
    resolution: int


def _cell_and_fraction(point: Coord, s: int, res: Resolution) -> tuple[int, int, float, float]:
    h, w = point
    sh = s * h / res.height
    sw = s * w / res.width
    ch, cw = int(np.floor(sh)), int(np.floor(sw))
    return ch, cw, sh - ch, sw - cw


def encode_drag(d: Drag, s: int, res: Resolution) -> np.ndarray:
    """Encode one drag to an (N, s, s, 6) array.

    With 0-based pixel coordinates in {0..H-1} x {0..W-1} the cell index
    floor(s*h/H) always lies in {0..s-1}, so no clamping is needed.
    """
    n = d.frame_count
    enc = np.full((n, s, s, CHANNELS_PER_DRAG), -1.0, dtype=np.float32)
    final = d.trajectory[-1]
    for frame in range(n):
        for offset, point in ((0, d.origin), (2, d.trajectory[frame]), (4, final)):
            ch, cw, fh, fw = _cell_and_fraction(point, s, res)
            enc[frame, ch, cw, offset] = fh
            enc[frame, ch, cw, offset + 1] = fw
    return enc


def encode_drag_set(drags: DragSet, s: int, res: Resolution, frame_count: int) -> DragEncoding:
    """Concatenate per-drag encodings in drag order, -1 for empty slots."""
    tensor = np.full(
        (frame_count, s, s, CHANNELS_PER_DRAG * drags.k_max), -1.0, dtype=np.float32
    )
    for k, drag in enumerate(drags):
        if drag.frame_count != frame_count:
            raise ValidationError(
                f"drag {k} has {drag.frame_count} frames, expected {frame_count}"
            )
        tensor[..., k * CHANNELS_PER_DRAG : (k + 1) * CHANNELS_PER_DRAG] = encode_drag(
            drag, s, res
        )
    return DragEncoding(tensor=tensor, resolution=s)


def _decode_group(frame_slice: np.ndarray, offset: int, res: Resolution, s: int) -> Coord:
    marked = np.argwhere(frame_slice[..., offset] >= 0.0)
    if len(marked) != 1:
        raise MalformedEncodingError(
            f"channel group at offset {offset} has {len(marked)} marked cells, expected 1"
        )
    ch, cw = (int(v) for v in marked[0])
    fh = float(frame_slice[ch, cw, offset])
    fw = float(frame_slice[ch, cw, offset + 1])
    h = int(round((ch + fh) * res.height / s))
    w = int(round((cw + fw) * res.width / s))
    return h, w


def decode_drag(enc: np.ndarray, res: Resolution) -> Drag:
    """Recover the exact pixel trajectory from an encode_drag output.

    Raises MalformedEncodingError unless each 2-channel group has exactly
    one marked cell per frame.
    """
    if enc.ndim != 4 or enc.shape[3] != CHANNELS_PER_DRAG:
        raise MalformedEncodingError(f"expected (N, s, s, 6) tensor, got shape {enc.shape}")
    s = enc.shape[1]
    trajectory = []
    origin = None
    for frame in range(enc.shape[0]):
        u = _decode_group(enc[frame], 0, res, s)
        v_n = _decode_group(enc[frame], 2, res, s)
        _decode_group(enc[frame], 4, res, s)  # final-location group must be well formed
        if origin is None:
            origin = u
        trajectory.append(v_n)
    return Drag(origin=origin, trajectory=tuple(trajectory))


class EncodingCache:
    """Content-addressed cache of drag-set encodings.

    Safe for concurrent readers; writes are serialized by a lock.  Entries
    are evicted FIFO beyond ``capacity``.
    """

    def __init__(self, capacity: int = 256):
        self.capacity = capacity
        self._lock = threading.Lock()
        self._entries: OrderedDict[str, DragEncoding] = OrderedDict()

    @staticmethod
    def key(drags: DragSet, s: int, res: Resolution, frame_count: int) -> str:
        hasher = hashlib.sha1()
        hasher.update(f"{s}|{res.height}|{res.width}|{frame_count}|{drags.k_max}".encode())
        for drag in drags:
            hasher.update(drag.as_array().tobytes())
            hasher.update(b"|")
        return hasher.hexdigest()

    def get(self, drags: DragSet, s: int, res: Resolution, frame_count: int) -> DragEncoding:
        key = self.key(drags, s, res, frame_count)
        with self._lock:
            hit = self._entries.get(key)
        if hit is not None:
            return hit
        enc = encode_drag_set(drags, s, res, frame_count)
        with self._lock:
            self._entries[key] = enc
            while len(self._entries) > self.capacity:
                self._entries.popitem(last=False)
        return enc


shared_cache = EncodingCache()
