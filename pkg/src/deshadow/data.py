"""Image I/O, paired shadow datasets, resizing, and the synthetic generator.

Images are channels-last float32 arrays in [-1, 1].  8-bit PNG values map in
via ``v / 127.5 - 1`` and back out via ``round((v + 1) * 127.5)`` clipped to
[0, 255]; the round trip is exact for every 8-bit level.

A paired dataset lives on disk as::

    root/
      train/ input/<name>.png   target/<name>.png
      test/  input/<name>.png   target/<name>.png

where matching file names pair a shadowed input with its shadow-free target.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

__all__ = [
    "ImagePair",
    "PairDataset",
    "load_image",
    "save_image",
    "to_uint8",
    "from_uint8",
    "load_pair_dataset",
    "random_crop_pair",
    "orient",
    "orient_pair",
    "resize",
    "synth_shadow_pair",
    "write_synthetic_dataset",
]


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Quantize a [-1, 1] image to 8-bit levels."""
    arr = np.asarray(image, dtype=np.float64)
    return np.clip(np.round((arr + 1.0) * 127.5), 0.0, 255.0).astype(np.uint8)


def from_uint8(levels: np.ndarray) -> np.ndarray:
    """Map 8-bit levels to the [-1, 1] float range."""
    return (np.asarray(levels, dtype=np.float32) / 127.5) - 1.0


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return from_uint8(arr)


def save_image(path: str | Path, image: np.ndarray) -> None:
    arr = to_uint8(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    Image.fromarray(arr, mode="RGB").save(path)


@dataclass
class ImagePair:
    """A shadowed input, its shadow-free target, and a stable identifier."""

    input: np.ndarray
    target: np.ndarray
    image_id: str


class PairDataset:
    """Lazy view over one split of a paired dataset directory."""

    def __init__(self, root: str | Path, split: str, ids: list[str]):
        self.root = Path(root)
        self.split = split
        self.ids = ids

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> ImagePair:
        name = self.ids[i]
        base = self.root / self.split
        pair = ImagePair(
            input=load_image(base / "input" / f"{name}.png"),
            target=load_image(base / "target" / f"{name}.png"),
            image_id=name,
        )
        if pair.input.shape != pair.target.shape:
            raise ValueError(
                f"pair {name!r}: input {pair.input.shape} vs target "
                f"{pair.target.shape}"
            )
        return pair

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def tag(self) -> str:
        """Dataset tag used to label reports (the root directory name)."""
        return self.root.name


def load_pair_dataset(root: str | Path, split: str) -> PairDataset:
    root = Path(root)
    in_dir = root / split / "input"
    tgt_dir = root / split / "target"
    if not in_dir.is_dir() or not tgt_dir.is_dir():
        raise FileNotFoundError(f"no {split}/input and {split}/target under {root}")
    in_ids = {p.stem for p in in_dir.glob("*.png")}
    tgt_ids = {p.stem for p in tgt_dir.glob("*.png")}
    if in_ids != tgt_ids:
        missing = sorted(in_ids ^ tgt_ids)
        raise ValueError(f"unpaired images in {root}/{split}: {missing}")
    return PairDataset(root, split, sorted(in_ids))


def random_crop_pair(pair: ImagePair, size: int, rng: np.random.Generator) -> ImagePair:
    """Crop the same ``size`` x ``size`` window from input and target."""
    h, w = pair.input.shape[:2]
    if pair.input.shape != pair.target.shape:
        raise ValueError("input/target shapes differ")
    if size > h or size > w:
        raise ValueError(f"crop {size} exceeds image {h}x{w}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return ImagePair(
        input=pair.input[top : top + size, left : left + size],
        target=pair.target[top : top + size, left : left + size],
        image_id=pair.image_id,
    )


def orient(image: np.ndarray, orientation: int) -> np.ndarray:
    """Apply one of the 8 square symmetries (rotations x optional flip).

    ``orientation`` is 0..7: the low two bits count quarter turns, bit 2 adds
    a horizontal flip.  0 is the identity; results are contiguous copies.
    """
    if not 0 <= orientation <= 7:
        raise ValueError(f"orientation must be 0..7, got {orientation}")
    out = np.rot90(image, orientation & 3, axes=(0, 1))
    if orientation & 4:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def orient_pair(pair: ImagePair, orientation: int) -> ImagePair:
    """Apply the same square symmetry to both halves of a pair."""
    return ImagePair(
        input=orient(pair.input, orientation),
        target=orient(pair.target, orientation),
        image_id=pair.image_id,
    )


# --------------------------------------------------------------------------
# Resizing: separable resampling with explicit kernels.  `bilinear` is a
# plain triangle kernel; `bicubic_antialias` is the Keys cubic (a = -0.5)
# whose support is widened by 1/scale on downscale.  Sample positions are
# pixel centers, out-of-range taps reflect about edge pixels (whole-sample
# reflection), and each output row of weights is normalized to sum to 1 so
# constant images stay constant.
# --------------------------------------------------------------------------


def _triangle(x: np.ndarray) -> np.ndarray:
    return np.maximum(0.0, 1.0 - np.abs(x))


def _keys_cubic(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    inner = 1.5 * ax**3 - 2.5 * ax**2 + 1.0
    outer = -0.5 * ax**3 + 2.5 * ax**2 - 4.0 * ax + 2.0
    return np.where(ax <= 1.0, inner, np.where(ax < 2.0, outer, 0.0))


def _mirror_index(idx: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def _axis_weights(in_size: int, out_size: int, method: str):
    """Tap indices (out, taps) and normalized weights for one axis."""
    scale = out_size / in_size
    if method == "nearest":
        src = np.floor((np.arange(out_size) + 0.5) / scale).astype(np.int64)
        idx = np.clip(src, 0, in_size - 1)[:, None]
        return idx, np.ones((out_size, 1), dtype=np.float64)
    if method == "bilinear":
        kernel, support = _triangle, 1.0
        widen = False
    elif method == "bicubic_antialias":
        kernel, support = _keys_cubic, 2.0
        widen = scale < 1.0
    else:
        raise ValueError(f"unknown resize method {method!r}")
    if widen:
        kscale = scale
        width = support / scale
    else:
        kscale = 1.0
        width = support
    u = (np.arange(out_size) + 0.5) / scale - 0.5
    left = np.floor(u - width).astype(np.int64) + 1
    n_taps = int(np.ceil(2.0 * width)) + 1
    idx = left[:, None] + np.arange(n_taps)[None, :]
    weights = kernel((u[:, None] - idx) * kscale)
    weights /= weights.sum(axis=1, keepdims=True)
    return _mirror_index(idx, in_size), weights


def resize(image: np.ndarray, size: int | tuple[int, int], method: str) -> np.ndarray:
    """Resize (H, W) or (H, W, C) data to ``size`` = (height, width)."""
    if isinstance(size, int):
        out_h, out_w = size, size
    else:
        out_h, out_w = int(size[0]), int(size[1])
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {(out_h, out_w)}")
    arr = np.asarray(image)
    if arr.ndim not in (2, 3):
        raise ValueError(f"expected 2-d or 3-d image, got shape {arr.shape}")
    if arr.shape[0] == out_h and arr.shape[1] == out_w:
        if method not in ("nearest", "bilinear", "bicubic_antialias"):
            raise ValueError(f"unknown resize method {method!r}")
        return arr.copy()
    dtype = arr.dtype
    work = arr.astype(np.float64)
    squeeze = work.ndim == 2
    if squeeze:
        work = work[:, :, None]

    idx_h, w_h = _axis_weights(work.shape[0], out_h, method)
    work = np.einsum("ot,othc->ohc", w_h, work[idx_h])
    idx_w, w_w = _axis_weights(work.shape[1], out_w, method)
    work = np.einsum("ot,hotc->hoc", w_w, work[:, idx_w])

    if squeeze:
        work = work[:, :, 0]
    return work.astype(dtype) if np.issubdtype(dtype, np.floating) else work


# --------------------------------------------------------------------------
# Synthetic shadow pairs: a smooth colored background with soft shapes and a
# touch of texture, darkened by one or two feathered attenuation regions.
# --------------------------------------------------------------------------


def _soft_region_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """A feathered ellipse or rotated-rectangle mask with values in [0, 1]."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = rng.uniform(0.2, 0.8) * h
    cx = rng.uniform(0.2, 0.8) * w
    theta = rng.uniform(0.0, np.pi)
    ry = (yy - cy) * np.cos(theta) - (xx - cx) * np.sin(theta)
    rx = (yy - cy) * np.sin(theta) + (xx - cx) * np.cos(theta)
    ay = rng.uniform(0.15, 0.45) * h
    ax = rng.uniform(0.15, 0.45) * w
    if rng.uniform() < 0.5:
        mask = ((ry / ay) ** 2 + (rx / ax) ** 2 <= 1.0).astype(np.float64)
    else:
        mask = ((np.abs(ry) <= ay) & (np.abs(rx) <= ax)).astype(np.float64)
    sigma = rng.uniform(1.0, 3.5)
    return np.clip(gaussian_filter(mask, sigma), 0.0, 1.0)


def synth_shadow_pair(
    rng: np.random.Generator,
    size: int,
    attenuation_range: tuple[float, float] = (0.2, 0.7),
    image_id: str | None = None,
) -> ImagePair:
    """Draw one (shadowed input, shadow-free target) pair.

    The shadow multiplies intensity (in [0, 1] space) by a feathered field in
    ``[attenuation_range[0], 1]``; with ``attenuation_range=(1.0, 1.0)`` the
    input equals the target bitwise.
    """
    lo, hi = attenuation_range
    if not 0.0 < lo <= hi <= 1.0:
        raise ValueError(f"attenuation_range must satisfy 0 < lo <= hi <= 1, got {attenuation_range}")
    h = w = int(size)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= max(h - 1, 1)
    xx /= max(w - 1, 1)

    lum = rng.uniform(0.3, 0.7) + rng.uniform(-0.35, 0.35) * (xx - 0.5) + rng.uniform(
        -0.35, 0.35
    ) * (yy - 0.5)
    tint = rng.uniform(0.7, 1.3, size=3)
    img = lum[:, :, None] * tint[None, None, :]

    for _ in range(int(rng.integers(1, 4))):
        mask = _soft_region_mask(rng, h, w)
        color = rng.uniform(0.08, 0.92, size=3)
        alpha = rng.uniform(0.45, 0.95) * mask
        img = img * (1.0 - alpha[:, :, None]) + color[None, None, :] * alpha[:, :, None]

    smooth_noise = gaussian_filter(rng.standard_normal((h, w, 3)), (1.2, 1.2, 0.0))
    img = img + 0.05 * smooth_noise + 0.005 * rng.standard_normal((h, w, 3))
    target01 = np.clip(img, 0.02, 0.98)

    shade = np.ones((h, w), dtype=np.float64)
    for _ in range(int(rng.integers(1, 3))):
        mask = _soft_region_mask(rng, h, w)
        atten = rng.uniform(lo, hi)
        shade = shade * (1.0 - (1.0 - atten) * mask)
    input01 = target01 * shade[:, :, None]

    if image_id is None:
        image_id = f"synth-{int(rng.integers(0, 1 << 32)):08x}"
    return ImagePair(
        input=(input01 * 2.0 - 1.0).astype(np.float32),
        target=(target01 * 2.0 - 1.0).astype(np.float32),
        image_id=image_id,
    )


def write_synthetic_dataset(
    root: str | Path,
    count: int,
    size: int,
    seed: int,
    test_count: int | None = None,
    attenuation_range: tuple[float, float] = (0.2, 0.7),
) -> Path:
    """Write a paired dataset plus a ``manifest.json`` and return the root."""
    if count < 1:
        raise ValueError("count must be >= 1")
    root = Path(root)
    if test_count is None:
        test_count = max(1, count // 4)
    rng = np.random.default_rng(seed)
    for split, n in (("train", count), ("test", test_count)):
        (root / split / "input").mkdir(parents=True, exist_ok=True)
        (root / split / "target").mkdir(parents=True, exist_ok=True)
        for i in range(n):
            pair = synth_shadow_pair(
                rng, size, attenuation_range, image_id=f"{split}{i:05d}"
            )
            save_image(root / split / "input" / f"{pair.image_id}.png", pair.input)
            save_image(root / split / "target" / f"{pair.image_id}.png", pair.target)
    manifest = {"seed": seed, "count": count, "size": size, "test_count": test_count}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return root
