"""Convolutional image codec: encoder/decoder with feature taps.

The encoder halves resolution at each stage after the first and records a
feature tap per stage; the decoder mirrors it and records taps at the same
set of resolutions.  Those taps are what the detail-injection stage consumes,
so their order and scale are part of this module's contract:

* encoder taps: index ``i`` at scale ``1 / 2**i`` (full resolution first)
* decoder taps: index ``i`` at scale ``1 / 2**(n-1-i)`` (full resolution last)

``partition``/``merge`` repack an image so high resolutions can ride through
the same codec: each ``k x k`` block becomes ``k*k`` channel groups in
``(dy, dx)`` row-major order.  ``expand_io_channels`` rewrites the boundary
convolutions of a trained codec so it accepts the packed layout: input-side
weights are duplicated per group and scaled by ``1/k**2`` (a block-mean), the
output convolution is duplicated per group unscaled so every group reproduces
the original pixel response.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import nn

__all__ = [
    "CodecConfig",
    "ConvCodec",
    "FeatureTapSet",
    "encode",
    "decode",
    "partition",
    "merge",
    "expand_io_channels",
    "image_to_tensor",
    "tensor_to_image",
]


@dataclass(frozen=True)
class CodecConfig:
    spatial_downscale: int = 8
    latent_channels: int = 4
    base_width: int = 32
    io_channels: int = 3

    def __post_init__(self):
        s = self.spatial_downscale
        if s < 2 or (s & (s - 1)) != 0:
            raise ValueError(f"spatial_downscale must be a power of two >= 2, got {s}")
        if self.latent_channels < 1 or self.base_width < 4 or self.io_channels < 1:
            raise ValueError("latent_channels, base_width, io_channels must be positive")

    @property
    def num_stages(self) -> int:
        return int(math.log2(self.spatial_downscale)) + 1

    @property
    def stage_widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * min(2**i, 4) for i in range(self.num_stages))

    def to_dict(self) -> dict:
        return {
            "spatial_downscale": self.spatial_downscale,
            "latent_channels": self.latent_channels,
            "base_width": self.base_width,
            "io_channels": self.io_channels,
        }


@dataclass
class FeatureTapSet:
    """Per-stage feature maps captured during an encode or decode pass."""

    taps: list[np.ndarray]
    source: str  # "encoder" or "decoder"


def _norm(width: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, width), width)


class ResBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.body = nn.Sequential(
            _norm(width),
            nn.SiLU(),
            nn.Conv2d(width, width, 3, padding=1),
            _norm(width),
            nn.SiLU(),
            nn.Conv2d(width, width, 3, padding=1),
        )

    def forward(self, x):
        return x + self.body(x)


class ConvCodec(nn.Module):
    """Image autoencoder; all tensor methods use (N, C, H, W) float32."""

    def __init__(self, config: CodecConfig):
        super().__init__()
        self.config = config
        ws = config.stage_widths
        n = config.num_stages

        enc = [nn.Sequential(nn.Conv2d(config.io_channels, ws[0], 3, padding=1), ResBlock(ws[0]))]
        for i in range(1, n):
            enc.append(
                nn.Sequential(nn.Conv2d(ws[i - 1], ws[i], 4, stride=2, padding=1), ResBlock(ws[i]))
            )
        self.enc_stages = nn.ModuleList(enc)
        self.to_latent = nn.Conv2d(ws[-1], config.latent_channels, 1)

        self.from_latent = nn.Conv2d(config.latent_channels, ws[-1], 3, padding=1)
        dec = [ResBlock(ws[-1])]
        for i in range(1, n):
            dec.append(
                nn.Sequential(
                    nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(ws[n - i], ws[n - 1 - i], 3, padding=1),
                    ResBlock(ws[n - 1 - i]),
                )
            )
        self.dec_stages = nn.ModuleList(dec)
        self.out_conv = nn.Conv2d(ws[0], config.io_channels, 3, padding=1)

    def encode_tensor(self, x: torch.Tensor):
        taps = []
        h = x
        for stage in self.enc_stages:
            h = stage(h)
            taps.append(h)
        return self.to_latent(h), taps

    def decode_tensor(self, z: torch.Tensor):
        taps = []
        h = self.from_latent(z)
        for stage in self.dec_stages:
            h = stage(h)
            taps.append(h)
        return self.out_conv(h), taps

    def forward(self, x: torch.Tensor):
        z, _ = self.encode_tensor(x)
        recon, _ = self.decode_tensor(z)
        return recon, z


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, C) numpy -> (1, C, H, W) float32 tensor."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3:
        raise ValueError(f"expected (H, W, C), got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]


def tensor_to_image(t: torch.Tensor) -> np.ndarray:
    """(1, C, H, W) or (C, H, W) tensor -> (H, W, C) float32 numpy."""
    if t.ndim == 4:
        if t.shape[0] != 1:
            raise ValueError(f"expected batch of 1, got {t.shape[0]}")
        t = t[0]
    return t.detach().cpu().numpy().transpose(1, 2, 0).astype(np.float32)


def _check_encodable(config: CodecConfig, image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[2] != config.io_channels:
        raise ValueError(
            f"expected (H, W, {config.io_channels}) image, got shape {image.shape}"
        )
    s = config.spatial_downscale
    if image.shape[0] % s or image.shape[1] % s:
        raise ValueError(
            f"image {image.shape[0]}x{image.shape[1]} not divisible by downscale {s}"
        )


def encode(codec: ConvCodec, image: np.ndarray) -> tuple[np.ndarray, FeatureTapSet]:
    """Encode an image to its latent; also return the per-stage encoder taps."""
    _check_encodable(codec.config, image)
    with torch.no_grad():
        z, taps = codec.encode_tensor(image_to_tensor(image))
    return tensor_to_image(z), FeatureTapSet([tensor_to_image(t) for t in taps], "encoder")


def decode(codec: ConvCodec, latent: np.ndarray) -> tuple[np.ndarray, FeatureTapSet]:
    """Decode a latent to an image; also return the per-stage decoder taps."""
    if latent.ndim != 3 or latent.shape[2] != codec.config.latent_channels:
        raise ValueError(
            f"expected (h, w, {codec.config.latent_channels}) latent, got {latent.shape}"
        )
    with torch.no_grad():
        y, taps = codec.decode_tensor(image_to_tensor(latent))
    return tensor_to_image(y), FeatureTapSet([tensor_to_image(t) for t in taps], "decoder")


def partition(image: np.ndarray, k: int) -> np.ndarray:
    """Pack each k x k block into channels: (H, W, C) -> (H/k, W/k, C*k*k)."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    arr = np.asarray(image)
    if arr.ndim != 3:
        raise ValueError(f"expected (H, W, C), got shape {arr.shape}")
    h, w, c = arr.shape
    if h % k or w % k:
        raise ValueError(f"image {h}x{w} not divisible by k={k}")
    out = arr.reshape(h // k, k, w // k, k, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(out.reshape(h // k, w // k, k * k * c))


def merge(packed: np.ndarray, k: int) -> np.ndarray:
    """Inverse of :func:`partition`."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    arr = np.asarray(packed)
    if arr.ndim != 3 or arr.shape[2] % (k * k):
        raise ValueError(f"expected (h, w, C*k*k) with k={k}, got shape {arr.shape}")
    h, w, ck2 = arr.shape
    c = ck2 // (k * k)
    out = arr.reshape(h, w, k, k, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(out.reshape(h * k, w * k, c))


def _tile_in_channels(weight: torch.Tensor, k2: int) -> torch.Tensor:
    return weight.repeat(1, k2, 1, 1) / k2


def _tile_out_channels(weight: torch.Tensor, k2: int) -> torch.Tensor:
    return weight.repeat(k2, 1, 1, 1)


def expand_io_channels(codec: ConvCodec, k: int) -> ConvCodec:
    """Adapt a trained codec to partitioned k x k input without retraining.

    Returns a new codec whose io width is ``io_channels * k**2``.  On images
    that are constant within each k x k block, its latent matches the
    original codec applied to the block-downscaled image, and its decoded
    groups all reproduce the original decoded pixels.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k == 1:
        return copy.deepcopy(codec)
    base_io = getattr(codec, "base_io_channels", codec.config.io_channels)
    if codec.config.io_channels != base_io:
        raise ValueError("codec io channels already expanded")
    k2 = k * k
    new_config = replace(codec.config, io_channels=codec.config.io_channels * k2)
    expanded = ConvCodec(new_config)
    state = codec.state_dict()
    state["enc_stages.0.0.weight"] = _tile_in_channels(state["enc_stages.0.0.weight"], k2)
    state["out_conv.weight"] = _tile_out_channels(state["out_conv.weight"], k2)
    state["out_conv.bias"] = state["out_conv.bias"].repeat(k2)
    expanded.load_state_dict(state)
    expanded.base_io_channels = codec.config.io_channels
    return expanded
