"""Procedural rain streaks for the additive model ``rainy = clean + streaks``."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from qsamnet.quaternion import load_png, save_png
from qsamnet.training import IMAGE_SUFFIXES


@dataclass(frozen=True)
class RainParams:
    streaks_per_mpx: float = 4000.0
    length: tuple[float, float] = (10.0, 40.0)
    width: tuple[float, float] = (1.0, 2.5)
    angle: tuple[float, float] = (-20.0, 20.0)  # degrees from vertical
    intensity: tuple[float, float] = (0.25, 0.6)
    blur_sigma: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if self.streaks_per_mpx < 0:
            raise ValueError("streak density must be non-negative")
        for name in ("length", "width"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} range must be positive and ordered, got {(lo, hi)}")
        lo, hi = self.intensity
        if not 0 <= lo <= hi <= 1:
            raise ValueError(f"intensity range must lie in [0, 1], got {self.intensity}")
        if self.angle[0] > self.angle[1]:
            raise ValueError("angle range must be ordered")
        if self.blur_sigma < 0:
            raise ValueError("blur sigma must be non-negative")


def streak_map(h: int, w: int, p: RainParams, rng: np.random.Generator) -> np.ndarray:
    """Rasterise anti-aliased line segments and blur them; result is ``H×W`` and non-negative."""
    n = int(round(p.streaks_per_mpx * h * w / 1e6))
    s = np.zeros((h, w), dtype=np.float64)
    if n == 0:
        return s
    cx = rng.uniform(0, w, n)
    cy = rng.uniform(0, h, n)
    lengths = rng.uniform(*p.length, n)
    widths = rng.uniform(*p.width, n)
    angles = np.deg2rad(rng.uniform(*p.angle, n))
    levels = rng.uniform(*p.intensity, n)
    for x0, y0, ln, wd, th, a in zip(cx, cy, lengths, widths, angles, levels):
        dx, dy = np.sin(th) * ln / 2, np.cos(th) * ln / 2
        ax, ay, bx, by = x0 - dx, y0 - dy, x0 + dx, y0 + dy
        reach = wd / 2 + 1
        c0 = max(0, int(np.floor(min(ax, bx) - reach)))
        c1 = min(w, int(np.ceil(max(ax, bx) + reach)) + 1)
        r0 = max(0, int(np.floor(min(ay, by) - reach)))
        r1 = min(h, int(np.ceil(max(ay, by) + reach)) + 1)
        if c0 >= c1 or r0 >= r1:
            continue
        py, px = np.mgrid[r0:r1, c0:c1] + 0.5
        vx, vy = bx - ax, by - ay
        t = np.clip(((px - ax) * vx + (py - ay) * vy) / (vx * vx + vy * vy), 0.0, 1.0)
        dist = np.hypot(px - (ax + t * vx), py - (ay + t * vy))
        cover = np.clip(wd / 2 + 0.5 - dist, 0.0, 1.0)
        np.maximum(s[r0:r1, c0:c1], a * cover, out=s[r0:r1, c0:c1])
    if p.blur_sigma > 0:
        s = gaussian_filter(s, p.blur_sigma, mode="constant")
    return np.maximum(s, 0.0)


def synthesize(clean: np.ndarray, p: RainParams, rng: np.random.Generator | None = None):
    """Return ``(rainy, streaks)`` with ``rainy = clip(clean + streaks, 0, 1)``.

    ``streaks`` is ``H×W×3`` (the same achromatic layer on every channel).
    """
    clean = np.asarray(clean, dtype=np.float64)
    if clean.ndim != 3 or clean.shape[2] != 3:
        raise ValueError(f"expected an H×W×3 image, got {clean.shape}")
    if clean.min() < 0 or clean.max() > 1:
        raise ValueError("clean image must lie in [0, 1]")
    rng = np.random.default_rng(p.seed) if rng is None else rng
    s = streak_map(clean.shape[0], clean.shape[1], p, rng)
    streaks = np.repeat(s[..., None], 3, axis=2)
    return np.clip(clean + streaks, 0.0, 1.0), streaks


def procedural_scene(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """A rain-free stand-in scene: colour gradient, blurred texture and a few flat shapes."""
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    base = np.empty((h, w, 3))
    for c in range(3):
        a, b, off = rng.uniform(-0.5, 0.5, 3)
        base[..., c] = 0.45 + off * 0.4 + a * xx + b * yy
    texture = gaussian_filter(rng.normal(size=(h, w, 3)), sigma=(3, 3, 0)) * 0.6
    img = base + texture
    for _ in range(int(rng.integers(2, 6))):
        color = rng.uniform(0.05, 0.9, 3)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(0.08, 0.3) * h, rng.uniform(0.08, 0.3) * w
        if rng.random() < 0.5:
            mask = ((yy * max(h, w) - cy) / ry) ** 2 + ((xx * max(h, w) - cx) / rx) ** 2 <= 1
        else:
            mask = (np.abs(yy * max(h, w) - cy) <= ry) & (np.abs(xx * max(h, w) - cx) <= rx)
        img[mask] = color
    return np.clip(img, 0.0, 0.85)


def write_scenes(out_dir, n: int, size: int = 64, seed: int = 0) -> list[Path]:
    """Write ``n`` procedural scenes as PNGs (used to build toy datasets)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n):
        p = out_dir / f"scene_{i:05d}.png"
        save_png(p, procedural_scene(size, size, np.random.default_rng([seed, i])))
        paths.append(p)
    return paths


def make_dataset(clean_dir, p: RainParams, n_pairs: int, out_root) -> Path:
    """Write ``n_pairs`` matched ``rainy/`` + ``clean/`` PNGs under ``out_root``.

    Pair ``i`` uses clean image ``i mod len(clean)`` and the streak generator seeded with
    ``(p.seed, i)``, so the output does not depend on generation order.
    """
    clean_dir, out_root = Path(clean_dir), Path(out_root)
    sources = sorted(q for q in clean_dir.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES)
    if not sources:
        raise FileNotFoundError(f"no clean images in {clean_dir}")
    try:
        (out_root / "rainy").mkdir(parents=True, exist_ok=True)
        (out_root / "clean").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PermissionError(f"cannot write dataset to {out_root}: {exc}") from exc
    for i in range(n_pairs):
        clean = load_png(sources[i % len(sources)])
        rainy, _ = synthesize(clean, p, np.random.default_rng([p.seed, i]))
        name = f"{i:05d}.png"
        save_png(out_root / "clean" / name, clean)
        save_png(out_root / "rainy" / name, rainy)
    return out_root
