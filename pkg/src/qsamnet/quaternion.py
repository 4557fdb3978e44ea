"""Quaternion scalar algebra, component-planar tensor layout and RGB <-> quaternion images.

A quaternion feature map with ``C`` quaternion channels is stored as a real array of
shape ``(B, 4*C, H, W)``: the first ``C`` planes hold the real parts, followed by the
``i``, ``j`` and ``k`` planes.  Images are one-channel quaternion maps whose components
are (luminosity, red, green, blue).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

# BT.601 luma weights, shared with the Y channel used by the metrics.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class Quaternion:
    a: float
    b: float = 0.0
    c: float = 0.0
    d: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.astuple()):
            raise ValueError(f"quaternion components must be finite, got {self.astuple()}")

    def astuple(self) -> tuple[float, float, float, float]:
        return (self.a, self.b, self.c, self.d)

    def __mul__(self, other: "Quaternion") -> "Quaternion":
        return hamilton(self, other)

    def __add__(self, other: "Quaternion") -> "Quaternion":
        return Quaternion(*(x + y for x, y in zip(self.astuple(), other.astuple())))

    def __neg__(self) -> "Quaternion":
        return Quaternion(-self.a, -self.b, -self.c, -self.d)

    def __abs__(self) -> float:
        return modulus(self)


ONE = Quaternion(1.0)
I = Quaternion(0.0, 1.0)
J = Quaternion(0.0, 0.0, 1.0)
K = Quaternion(0.0, 0.0, 0.0, 1.0)


def hamilton(x: Quaternion, y: Quaternion) -> Quaternion:
    """Hamilton product ``x ⊗ y`` (non-commutative)."""
    a1, b1, c1, d1 = x.astuple()
    a2, b2, c2, d2 = y.astuple()
    return Quaternion(
        a1 * a2 - b1 * b2 - c1 * c2 - d1 * d2,
        a1 * b2 + b1 * a2 + c1 * d2 - d1 * c2,
        a1 * c2 - b1 * d2 + c1 * a2 + d1 * b2,
        a1 * d2 + b1 * c2 - c1 * b2 + d1 * a2,
    )


def conjugate(q: Quaternion) -> Quaternion:
    return Quaternion(q.a, -q.b, -q.c, -q.d)


def modulus(q: Quaternion) -> float:
    return math.sqrt(q.a * q.a + q.b * q.b + q.c * q.c + q.d * q.d)


def hamilton_array(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Vectorised Hamilton product over a trailing axis of length 4."""
    a1, b1, c1, d1 = np.moveaxis(np.asarray(x), -1, 0)
    a2, b2, c2, d2 = np.moveaxis(np.asarray(y), -1, 0)
    return np.stack(
        [
            a1 * a2 - b1 * b2 - c1 * c2 - d1 * d2,
            a1 * b2 + b1 * a2 + c1 * d2 - d1 * c2,
            a1 * c2 - b1 * d2 + c1 * a2 + d1 * b2,
            a1 * d2 + b1 * c2 - c1 * b2 + d1 * a2,
        ],
        axis=-1,
    )


# ---------------------------------------------------------------------------
# component-planar layout


def pack(a: np.ndarray, b: np.ndarray, c: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Stack four ``(B, C, H, W)`` component arrays into one ``(B, 4C, H, W)`` array."""
    parts = [np.asarray(p) for p in (a, b, c, d)]
    shape = parts[0].shape
    if len(shape) != 4 or any(p.shape != shape for p in parts):
        raise ValueError("pack expects four (B, C, H, W) arrays of one shape")
    return np.concatenate(parts, axis=1)


def unpack(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`pack`."""
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] % 4:
        raise ValueError(f"expected (B, 4C, H, W) with 4C divisible by 4, got {x.shape}")
    c = x.shape[1] // 4
    return x[:, :c], x[:, c : 2 * c], x[:, 2 * c : 3 * c], x[:, 3 * c :]


def components_last(x: np.ndarray) -> np.ndarray:
    """``(B, 4C, H, W)`` -> ``(B, C, H, W, 4)`` view-friendly copy for per-pixel algebra."""
    b, c4, h, w = x.shape
    return np.moveaxis(x.reshape(b, 4, c4 // 4, h, w), 1, -1)


def components_first(q: np.ndarray) -> np.ndarray:
    """Inverse of :func:`components_last`."""
    b, c, h, w, _ = q.shape
    return np.moveaxis(q, -1, 1).reshape(b, 4 * c, h, w)


# ---------------------------------------------------------------------------
# images


def encode_image(rgb: np.ndarray) -> np.ndarray:
    """Encode an ``H×W×3`` RGB image in [0, 1] as a ``(4, H, W)`` quaternion image (L, R, G, B)."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an H×W×3 image, got shape {rgb.shape}")
    if rgb.size and (np.nanmin(rgb) < 0 or np.nanmax(rgb) > 1 or not np.all(np.isfinite(rgb))):
        raise ValueError("pixel values must lie in [0, 1]")
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    lum = LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b
    return np.stack([lum, r, g, b], axis=0)


def decode_image(q: np.ndarray) -> np.ndarray:
    """Drop the luminosity component and clamp (R, G, B) to [0, 1]; returns ``H×W×3``."""
    q = np.asarray(q)
    if q.ndim != 3 or q.shape[0] != 4:
        raise ValueError(f"expected a (4, H, W) quaternion image, got shape {q.shape}")
    return np.clip(np.moveaxis(q[1:], 0, -1), 0.0, 1.0)


def encode_batch(images, dtype=np.float32) -> np.ndarray:
    """Encode a sequence of RGB images of one size into a ``(B, 4, H, W)`` network input."""
    return np.stack([encode_image(im) for im in images]).astype(dtype)


def load_png(path) -> np.ndarray:
    """Read an 8-bit image as float64 RGB in [0, 1] (alpha dropped)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float64) / 255.0


def save_png(path, rgb: np.ndarray) -> None:
    rgb = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.rint(rgb * 255.0).astype(np.uint8)).save(path)
