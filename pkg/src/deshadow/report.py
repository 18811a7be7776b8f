"""File emission for reports: CSV/JSON helpers and matplotlib figures.

Every report directory pairs machine-readable output (CSV/JSON) with a
rendered PNG figure of the same data.  All figures use the Agg backend so
report generation works headless.
"""

from __future__ import annotations

import csv
import json
import math
import time
from pathlib import Path
from typing import Any, Iterable, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "json_safe",
    "write_json",
    "write_training_log",
    "loss_curve_figure",
    "metrics_figure",
    "variance_figure",
    "grouped_bar_figure",
    "image_grid_figure",
    "write_run_manifest",
]

_FIG_DPI = 110


def json_safe(value: Any) -> Any:
    """Recursively replace non-finite floats with their string sentinels.

    JSON has no literal for infinities or NaN; reports spell them ``"inf"``,
    ``"-inf"`` and ``"nan"``.
    """
    if isinstance(value, dict):
        return {k: json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(v) for v in value]
    if isinstance(value, (np.floating, np.integer)):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        if math.isnan(value):
            return "nan"
        return "inf" if value > 0 else "-inf"
    return value


def write_json(path: str | Path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(json_safe(payload), indent=2) + "\n")
    return path


def write_training_log(path: str | Path, rows: Iterable[tuple[int, float]]) -> Path:
    """Write the per-epoch loss log as ``epoch,loss`` CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for epoch, loss in rows:
            writer.writerow([epoch, f"{loss:.8g}"])
    return path


def loss_curve_figure(
    path: str | Path, losses: Sequence[float], title: str = "training loss"
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    epochs = np.arange(1, len(losses) + 1)
    ax.plot(epochs, losses, lw=1.2)
    if len(losses) > 0 and min(losses) > 0:
        ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_FIG_DPI)
    plt.close(fig)
    return path


def metrics_figure(
    path: str | Path,
    image_ids: Sequence[str],
    psnrs: Sequence[float],
    ssims: Sequence[float],
    title: str = "per-image metrics",
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    x = np.arange(len(image_ids))
    finite_psnr = [p if math.isfinite(p) else np.nan for p in psnrs]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6.4, 4.6), sharex=True)
    ax1.bar(x, finite_psnr, color="#4878cf")
    ax1.set_ylabel("PSNR (dB)")
    ax1.set_title(title)
    ax2.bar(x, ssims, color="#6acc65")
    ax2.set_ylabel("SSIM")
    ax2.set_ylim(0, 1.05)
    ax2.set_xlabel("image")
    if len(image_ids) <= 24:
        ax2.set_xticks(x)
        ax2.set_xticklabels(image_ids, rotation=90, fontsize=6)
    for ax in (ax1, ax2):
        ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=_FIG_DPI)
    plt.close(fig)
    return path


def variance_figure(
    path: str | Path,
    image_ids: Sequence[str],
    variances: Sequence[float],
    mean_variance: float,
    title: str = "per-image PSNR variance across seeds",
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    x = np.arange(len(image_ids))
    finite = [v if math.isfinite(v) else np.nan for v in variances]
    fig, ax = plt.subplots(figsize=(6.4, 3.2))
    ax.bar(x, finite, color="#b47cc7")
    if math.isfinite(mean_variance):
        ax.axhline(mean_variance, color="k", lw=1.0, ls="--", label="mean")
        ax.legend(fontsize=8)
    ax.set_xlabel("image")
    ax.set_ylabel("PSNR variance (dB$^2$)")
    ax.set_title(title)
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=_FIG_DPI)
    plt.close(fig)
    return path


def grouped_bar_figure(
    path: str | Path,
    group_labels: Sequence[str],
    series: dict[str, Sequence[float]],
    ylabel: str = "",
    title: str = "",
    log_y: bool = False,
) -> Path:
    """Grouped bar chart: one bar per series inside each labeled group."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    x = np.arange(len(group_labels))
    width = 0.8 / max(1, len(series))
    fig, ax = plt.subplots(figsize=(6.4, 3.4))
    for j, (name, values) in enumerate(series.items()):
        offset = (j - (len(series) - 1) / 2) * width
        ax.bar(x + offset, values, width=width, label=name)
    if log_y:
        ax.set_yscale("log")
    ax.set_xticks(x)
    ax.set_xticklabels(group_labels, fontsize=8)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=_FIG_DPI)
    plt.close(fig)
    return path


def image_grid_figure(
    path: str | Path,
    panels: dict[str, np.ndarray],
    title: str | None = None,
    cols: int = 4,
) -> Path:
    """Render named images (float arrays in [0, 1] or [-1, 1]) in a grid."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = len(panels)
    cols = max(1, min(cols, n))
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2.6 * cols, 2.8 * rows))
    axes = np.atleast_1d(axes).ravel()
    for ax, (name, img) in zip(axes, panels.items()):
        arr = np.asarray(img, dtype=np.float64)
        if arr.min() < 0.0:
            arr = (arr + 1.0) / 2.0
        ax.imshow(np.clip(arr, 0.0, 1.0))
        ax.set_title(name, fontsize=8)
        ax.axis("off")
    for ax in axes[n:]:
        ax.axis("off")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=_FIG_DPI)
    plt.close(fig)
    return path


def write_run_manifest(
    out_dir: str | Path,
    command: str,
    config_hash: str | None,
    seeds: Sequence[int],
    started_at: float,
    extra: dict | None = None,
) -> Path:
    """Record what produced the artifacts in ``out_dir``."""
    payload = {
        "command": command,
        "config_hash": config_hash,
        "seeds": list(seeds),
        "wall_time_s": round(time.time() - started_at, 3),
    }
    if extra:
        payload.update(extra)
    return write_json(Path(out_dir) / "run_manifest.json", payload)
