"""Image quality metrics and the evaluation harnesses built on them.

Both metrics quantize to 8-bit levels first, so they measure exactly what a
saved PNG would score.  PSNR uses data range 255 and returns ``inf`` for
identical images.  SSIM uses an 11x11 Gaussian window (sigma 1.5,
K1 = 0.01, K2 = 0.03), is computed per channel at valid window positions
only, and the channel means are averaged.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from .data import PairDataset, load_pair_dataset, resize, to_uint8
from .report import (
    metrics_figure,
    variance_figure,
    write_json,
)

__all__ = [
    "psnr",
    "ssim",
    "ImageScore",
    "MetricsRecord",
    "VarianceReport",
    "evaluate",
    "seed_variance",
    "cross_dataset_eval",
]

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_DATA_RANGE = 255.0


def _levels(image: np.ndarray) -> np.ndarray:
    return to_uint8(image).astype(np.float64)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB between two [-1, 1] images after 8-bit quantization."""
    qa, qb = _levels(a), _levels(b)
    if qa.shape != qb.shape:
        raise ValueError(f"shape mismatch: {qa.shape} vs {qb.shape}")
    mse = float(np.mean((qa - qb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(_DATA_RANGE**2 / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(plane: np.ndarray, window: np.ndarray) -> np.ndarray:
    r = window.shape[0] // 2
    out = correlate1d(plane, window, axis=0, mode="mirror")
    out = correlate1d(out, window, axis=1, mode="mirror")
    return out[r:-r, r:-r]


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM between two [-1, 1] images after 8-bit quantization."""
    qa, qb = _levels(a), _levels(b)
    if qa.shape != qb.shape:
        raise ValueError(f"shape mismatch: {qa.shape} vs {qb.shape}")
    if qa.ndim == 2:
        qa, qb = qa[:, :, None], qb[:, :, None]
    if qa.ndim != 3:
        raise ValueError(f"expected 2-d or 3-d images, got shape {qa.shape}")
    h, w = qa.shape[:2]
    if h < _SSIM_WINDOW or w < _SSIM_WINDOW:
        raise ValueError(
            f"image {h}x{w} smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} window"
        )
    window = _gaussian_window(_SSIM_WINDOW, _SSIM_SIGMA)
    c1 = (_SSIM_K1 * _DATA_RANGE) ** 2
    c2 = (_SSIM_K2 * _DATA_RANGE) ** 2
    channel_means = []
    for c in range(qa.shape[2]):
        x, y = qa[:, :, c], qb[:, :, c]
        mu_x = _filter_valid(x, window)
        mu_y = _filter_valid(y, window)
        var_x = _filter_valid(x * x, window) - mu_x**2
        var_y = _filter_valid(y * y, window) - mu_y**2
        cov = _filter_valid(x * y, window) - mu_x * mu_y
        score = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
            (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
        )
        channel_means.append(float(score.mean()))
    return float(np.mean(channel_means))


@dataclass
class ImageScore:
    image_id: str
    psnr_db: float
    ssim: float
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass
class MetricsRecord:
    """Per-image scores plus the protocol that produced them."""

    rows: list[ImageScore]
    protocol: dict
    label: str | None = None

    def scored(self) -> list[ImageScore]:
        return [r for r in self.rows if not r.failed]

    @property
    def count(self) -> int:
        return len(self.scored())

    @property
    def mean_psnr(self) -> float:
        rows = self.scored()
        if not rows:
            return math.nan
        return float(np.mean([r.psnr_db for r in rows]))

    @property
    def mean_ssim(self) -> float:
        rows = self.scored()
        if not rows:
            return math.nan
        return float(np.mean([r.ssim for r in rows]))

    def summary(self) -> dict:
        return {
            "label": self.label,
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "count": self.count,
            "protocol": self.protocol,
        }

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_id", "psnr_db", "ssim"])
            for row in self.rows:
                writer.writerow([row.image_id, repr(row.psnr_db), repr(row.ssim)])
        return path

    def write(self, out_dir: str | Path, stem: str = "metrics") -> None:
        """Emit CSV + JSON summary + a rendered figure into ``out_dir``."""
        out_dir = Path(out_dir)
        self.write_csv(out_dir / f"{stem}.csv")
        write_json(out_dir / f"{stem}_summary.json", self.summary())
        metrics_figure(
            out_dir / f"{stem}.png",
            [r.image_id for r in self.rows],
            [r.psnr_db for r in self.rows],
            [r.ssim for r in self.rows],
            title=self.label or "per-image metrics",
        )


def _eval_protocol(seed: int, eval_size: int, resize_method: str, split: str | None) -> dict:
    proto = {
        "eval_size": eval_size,
        "resize_method": resize_method,
        "seed": seed,
        "quantization": "uint8",
    }
    if split is not None:
        proto["split"] = split
    return proto


def evaluate(
    model_fn: Callable[[np.ndarray], np.ndarray],
    dataset: Iterable,
    *,
    seed: int = 1,
    eval_size: int = 256,
    resize_method: str = "bicubic_antialias",
    out_dir: str | Path | None = None,
    label: str | None = None,
) -> MetricsRecord:
    """Score ``model_fn`` over a paired dataset.

    Prediction and target are resized to ``eval_size`` square, quantized to
    8 bits, and scored.  Exceptions raised by ``model_fn`` for one image do
    not abort the run; the image is recorded as a failed row and excluded
    from the summary means (``count`` reports scored rows).  ``seed`` is not
    passed to ``model_fn`` — bind it in the closure — but is recorded in the
    protocol so reports say what produced them.
    """
    pairs = list(dataset)
    if not pairs:
        raise ValueError("empty dataset: nothing to evaluate")
    if label is None:
        label = getattr(dataset, "tag", None)
    rows: list[ImageScore] = []
    for pair in pairs:
        try:
            pred = np.asarray(model_fn(pair.input))
            if pred.shape != pair.target.shape:
                raise ValueError(
                    f"model returned shape {pred.shape}, expected {pair.target.shape}"
                )
            pred_e = resize(pred, eval_size, resize_method)
            tgt_e = resize(pair.target, eval_size, resize_method)
            rows.append(
                ImageScore(pair.image_id, psnr(pred_e, tgt_e), ssim(pred_e, tgt_e))
            )
        except Exception as exc:  # per-image failures become failed rows
            rows.append(
                ImageScore(
                    pair.image_id,
                    math.nan,
                    math.nan,
                    error=f"{type(exc).__name__}: {exc}",
                )
            )
    split = getattr(dataset, "split", None)
    record = MetricsRecord(
        rows, _eval_protocol(seed, eval_size, resize_method, split), label=label
    )
    if out_dir is not None:
        record.write(out_dir)
    return record


def _population_variance(values: Sequence[float]) -> float:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return math.nan
    # Identical values (including +inf ties) vary by exactly zero.
    if np.all(arr == arr[0]):
        return 0.0
    if not np.all(np.isfinite(arr)):
        return math.inf
    return float(arr.var())


@dataclass
class VarianceReport:
    """PSNR spread across sampling seeds, population convention (ddof = 0)."""

    seeds: list[int]
    mean_psnr: float
    mean_variance: float
    per_image: list[dict]
    protocol: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "seeds": self.seeds,
            "mean_psnr": self.mean_psnr,
            "mean_variance": self.mean_variance,
            "variance_convention": "population",
            "per_image": self.per_image,
            "protocol": self.protocol,
        }

    def write(self, out_dir: str | Path, stem: str = "variance") -> None:
        out_dir = Path(out_dir)
        write_json(out_dir / f"{stem}.json", self.to_dict())
        variance_figure(
            out_dir / f"{stem}.png",
            [r["image_id"] for r in self.per_image],
            [
                r["psnr_variance"]
                if isinstance(r["psnr_variance"], float)
                else math.nan
                for r in self.per_image
            ],
            self.mean_variance if isinstance(self.mean_variance, float) else math.nan,
        )


def seed_variance(
    model_fn_with_seed: Callable[[np.ndarray, int], np.ndarray],
    dataset: Iterable,
    seeds: Sequence[int],
    *,
    eval_size: int = 256,
    resize_method: str = "bicubic_antialias",
    out_dir: str | Path | None = None,
) -> VarianceReport:
    """Re-run inference under each seed and report per-image PSNR variance.

    ``model_fn_with_seed(image, seed)`` must be deterministic given both
    arguments; a deterministic model therefore reports exactly 0.0 variance.
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("need at least one seed")
    records = []
    for s in seeds:
        records.append(
            evaluate(
                lambda img, _s=s: model_fn_with_seed(img, _s),
                dataset,
                seed=s,
                eval_size=eval_size,
                resize_method=resize_method,
            )
        )
    for rec in records:
        for row in rec.rows:
            if row.failed:
                raise RuntimeError(
                    f"inference failed for {row.image_id!r}: {row.error}"
                )
    ids = [row.image_id for row in records[0].rows]
    per_image = []
    variances = []
    for i, image_id in enumerate(ids):
        values = [rec.rows[i].psnr_db for rec in records]
        var = _population_variance(values)
        variances.append(var)
        per_image.append({"image_id": image_id, "psnr_variance": var})
    report = VarianceReport(
        seeds=seeds,
        mean_psnr=float(np.mean([rec.mean_psnr for rec in records])),
        mean_variance=_population_variance_mean(variances),
        per_image=per_image,
        protocol=_eval_protocol(seeds[0], eval_size, resize_method, None),
    )
    if out_dir is not None:
        report.write(out_dir)
    return report


def _population_variance_mean(variances: Sequence[float]) -> float:
    arr = np.asarray(variances, dtype=np.float64)
    return float(arr.mean())


def cross_dataset_eval(
    model: Callable[[np.ndarray, int], np.ndarray],
    dataset_root: str | Path,
    *,
    split: str = "test",
    seed: int = 1,
    eval_size: int = 256,
    resize_method: str = "bicubic_antialias",
    out_dir: str | Path | None = None,
) -> MetricsRecord:
    """Evaluate a model on a dataset it was not necessarily trained on.

    ``model`` is called as ``model(image, seed)``.  If it carries a
    ``dataset_tag`` attribute (models loaded from checkpoints do), the report
    is labeled ``"<train-tag>-><test-tag>"``; otherwise the train side is
    labeled ``unknown`` with a warning.
    """
    dataset = load_pair_dataset(dataset_root, split)
    train_tag = getattr(model, "dataset_tag", None)
    if train_tag is None:
        warnings.warn(
            "model has no training dataset tag; labeling cross-eval as 'unknown'",
            stacklevel=2,
        )
        train_tag = "unknown"
    label = f"{train_tag}->{dataset.tag}"
    record = evaluate(
        lambda img: model(img, seed),
        dataset,
        seed=seed,
        eval_size=eval_size,
        resize_method=resize_method,
        label=label,
    )
    if out_dir is not None:
        record.write(out_dir, stem="cross_eval")
    return record
