"""Matplotlib figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _figure(width=5.0, ratio=0.62):
    return plt.subplots(figsize=(width, width * ratio))


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_loss_curves(curves: dict[str, np.ndarray], path, window: int = 50, logy: bool = True) -> Path:
    """One smoothed training-loss line per entry of ``curves``."""
    from qsamnet.training import smoothed

    with plt.rc_context(STYLE):
        fig, ax = _figure()
        for label, values in curves.items():
            values = np.asarray(values, dtype=np.float64)
            ax.plot(np.arange(values.size), smoothed(values, window), label=label, lw=1.2)
        ax.set_xlabel("iteration")
        ax.set_ylabel(f"loss (window-{window} mean)")
        if logy:
            ax.set_yscale("log")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_metric_report(report, path) -> Path:
    """Per-image PSNR bars with the dataset mean as a horizontal rule."""
    with plt.rc_context(STYLE):
        fig, ax = _figure(width=max(4.0, 0.18 * len(report.names) + 2))
        x = np.arange(len(report.names))
        ax.bar(x, report.psnr, color="0.55", width=0.8)
        ax.axhline(report.mean_psnr, color="C3", lw=1, label=f"mean {report.mean_psnr:.2f} dB")
        ax.set_ylabel("PSNR on Y (dB)")
        ax.set_xticks(x)
        ax.set_xticklabels(report.names, rotation=90, fontsize=5)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_psnr_comparison(rows: dict[str, float], path) -> Path:
    """Horizontal bars of mean PSNR for labelled methods (input, quaternion, real twin...)."""
    with plt.rc_context(STYLE):
        fig, ax = _figure(width=4.5, ratio=0.5)
        labels = list(rows)
        ax.barh(labels, [rows[k] for k in labels], color=[f"C{i}" for i in range(len(labels))])
        for i, k in enumerate(labels):
            ax.text(rows[k], i, f" {rows[k]:.2f}", va="center", fontsize=8)
        ax.set_xlabel("mean PSNR on Y (dB)")
        return _save(fig, path)
