"""PNG and base64 helpers for [-1, 1] float frames."""

from __future__ import annotations

import base64
import io

import numpy as np
from PIL import Image


def float_to_uint8(frame: np.ndarray) -> np.ndarray:
    """[-1, 1] float (H, W, C) to uint8."""
    return np.clip(np.rint((frame + 1.0) * 127.5), 0, 255).astype(np.uint8)


def uint8_to_float(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float32) / 127.5 - 1.0


def save_frame(path, frame: np.ndarray) -> None:
    Image.fromarray(float_to_uint8(frame)).save(path)


def load_frame(path) -> np.ndarray:
    with Image.open(path) as img:
        return uint8_to_float(np.asarray(img.convert("RGB")))


def frame_to_base64(frame: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(float_to_uint8(frame)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def base64_to_frame(data: str) -> np.ndarray:
    raw = base64.b64decode(data, validate=True)
    with Image.open(io.BytesIO(raw)) as img:
        return uint8_to_float(np.asarray(img.convert("RGB")))


def resize_frame(frame: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a [-1, 1] float frame."""
    img = Image.fromarray(float_to_uint8(frame)).resize((width, height), Image.BILINEAR)
    return uint8_to_float(np.asarray(img))
