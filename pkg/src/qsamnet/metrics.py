"""PSNR and SSIM on the BT.601 luma (Y) channel."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from qsamnet.quaternion import LUMA_WEIGHTS, load_png

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """Full-range BT.601 luma of an ``H×W×3`` image in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected H×W×3, got {img.shape}")
    if img.size and (img.min() < 0 or img.max() > 1):
        raise ValueError("pixel values must lie in [0, 1]")
    return LUMA_WEIGHTS[0] * img[..., 0] + LUMA_WEIGHTS[1] * img[..., 1] + LUMA_WEIGHTS[2] * img[..., 2]


def psnr(x: np.ndarray, y: np.ndarray, peak: float = 1.0) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    err = np.mean((x - y) ** 2)
    if err == 0:
        return PSNR_CAP
    return min(PSNR_CAP, float(10.0 * np.log10(peak * peak / err)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable correlation, 'valid' region only
    rows = np.lib.stride_tricks.sliding_window_view(img, g.size, axis=1) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, g.size, axis=0) @ g


def ssim_map(x: np.ndarray, y: np.ndarray, peak: float = 1.0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim != 2 or min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs 2-D images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {x.shape}")
    g = gaussian_window()
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim(x: np.ndarray, y: np.ndarray, peak: float = 1.0) -> float:
    """Mean SSIM over all 11×11 Gaussian (σ=1.5) windows fully inside the image."""
    return float(np.mean(ssim_map(x, y, peak)))


@dataclass
class MetricReport:
    names: list[str] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    errors: dict[str, str] = field(default_factory=dict)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["filename", "psnr_db", "ssim"])
            for n, p, s in zip(self.names, self.psnr, self.ssim):
                w.writerow([n, f"{p:.6f}", f"{s:.6f}"])
            w.writerow(["MEAN", f"{self.mean_psnr:.6f}", f"{self.mean_ssim:.6f}"])


def evaluate(pairs) -> MetricReport:
    """Score ``(name, restored_rgb, clean_rgb)`` triples on the Y channel.

    A pair whose shapes differ is recorded in ``errors`` and skipped.
    """
    report = MetricReport()
    for name, restored, clean in pairs:
        if np.shape(restored) != np.shape(clean):
            report.errors[name] = f"shape mismatch {np.shape(restored)} vs {np.shape(clean)}"
            log.warning("%s: %s", name, report.errors[name])
            continue
        yr, yc = rgb_to_y(restored), rgb_to_y(clean)
        report.names.append(name)
        report.psnr.append(psnr(yr, yc))
        report.ssim.append(ssim(yr, yc))
    return report


def evaluate_dirs(restored_dir, clean_dir) -> MetricReport:
    """Pair images by file name across two directories and score them."""
    restored_dir, clean_dir = Path(restored_dir), Path(clean_dir)
    names = sorted(p.name for p in restored_dir.iterdir() if p.suffix.lower() == ".png")

    def triples():
        for n in names:
            partner = clean_dir / n
            if not partner.is_file():
                log.warning("%s: no ground-truth image, skipped", n)
                continue
            yield n, load_png(restored_dir / n), load_png(partner)

    report = evaluate(triples())
    for n in names:
        if not (clean_dir / n).is_file():
            report.errors[n] = "missing ground truth"
    return report
