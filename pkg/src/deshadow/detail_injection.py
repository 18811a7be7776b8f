"""Detail injection: residual branches that feed encoder features back into
a frozen decoder.

Each decoder stage after the first gets a branch.  The branch concatenates
the decoder feature with the encoder tap of the same resolution (plus resized
semantic features on the branches configured for them), fuses with a conv,
runs a residual-in-residual dense block (RRDB), and adds a zero-initialized
projection back onto the decoder feature.  The stage's own output convolution
is copied from the decoder, so a freshly initialized injector reproduces the
plain decoder exactly — training can only move away from the decoder's output,
never start somewhere else.

Residuals here are delta-form: a dense block returns
``x + s * conv_out(dense_features)`` and the RRDB returns
``x + s * (blocks(x) - x)`` with ``s = 0.2`` at both levels, so zeroing the
dense blocks' output layers collapses the whole RRDB to the identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .codec import ConvCodec, FeatureTapSet, image_to_tensor, tensor_to_image
from .data import resize

__all__ = [
    "InjectionConfig",
    "DenseBlock",
    "RRDB",
    "InjectionBranch",
    "DetailInjector",
    "decode_with_injection",
    "decode_with_injection_tensors",
    "SemanticEmbedder",
    "semantic_features",
    "pca_visualize",
]


@dataclass(frozen=True)
class InjectionConfig:
    num_branches: int = 3
    dense_blocks: int = 3
    growth_channels: int = 16
    residual_scale: float = 0.2
    use_semantic: bool = True
    semantic_channels: int = 256
    semantic_branches: tuple[int, ...] = (1, 2)

    def __post_init__(self):
        if self.num_branches < 1 or self.dense_blocks < 1 or self.growth_channels < 1:
            raise ValueError("branch/block/growth counts must be positive")
        if not 0.0 < self.residual_scale <= 1.0:
            raise ValueError(f"residual_scale must be in (0, 1], got {self.residual_scale}")
        bad = [b for b in self.semantic_branches if not 1 <= b <= self.num_branches]
        if bad:
            raise ValueError(f"semantic branch indices out of range: {bad}")

    def to_dict(self) -> dict:
        return {
            "num_branches": self.num_branches,
            "dense_blocks": self.dense_blocks,
            "growth_channels": self.growth_channels,
            "residual_scale": self.residual_scale,
            "use_semantic": self.use_semantic,
            "semantic_channels": self.semantic_channels,
            "semantic_branches": list(self.semantic_branches),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InjectionConfig":
        d = dict(d)
        d["semantic_branches"] = tuple(d["semantic_branches"])
        return cls(**d)


class DenseBlock(nn.Module):
    def __init__(self, width: int, growth: int, scale: float):
        super().__init__()
        self.scale = scale
        self.conv1 = nn.Conv2d(width, growth, 3, padding=1)
        self.conv2 = nn.Conv2d(width + growth, growth, 3, padding=1)
        self.conv3 = nn.Conv2d(width + 2 * growth, growth, 3, padding=1)
        self.conv4 = nn.Conv2d(width + 3 * growth, growth, 3, padding=1)
        self.conv5 = nn.Conv2d(width + 4 * growth, width, 3, padding=1)
        self.act = nn.LeakyReLU(0.2, inplace=False)
        for conv in (self.conv1, self.conv2, self.conv3, self.conv4, self.conv5):
            with torch.no_grad():
                conv.weight *= 0.1
                conv.bias.zero_()

    def forward(self, x):
        c1 = self.act(self.conv1(x))
        c2 = self.act(self.conv2(torch.cat([x, c1], 1)))
        c3 = self.act(self.conv3(torch.cat([x, c1, c2], 1)))
        c4 = self.act(self.conv4(torch.cat([x, c1, c2, c3], 1)))
        c5 = self.conv5(torch.cat([x, c1, c2, c3, c4], 1))
        return x + self.scale * c5


class RRDB(nn.Module):
    def __init__(self, width: int, growth: int, blocks: int, scale: float):
        super().__init__()
        self.scale = scale
        self.blocks = nn.Sequential(
            *(DenseBlock(width, growth, scale) for _ in range(blocks))
        )

    def forward(self, x):
        return x + self.scale * (self.blocks(x) - x)


class InjectionBranch(nn.Module):
    def __init__(
        self,
        width: int,
        enc_width: int,
        semantic_channels: int,
        config: InjectionConfig,
    ):
        super().__init__()
        self.width = width
        self.enc_width = enc_width
        self.semantic_channels = semantic_channels
        self.fuse = nn.Conv2d(width + enc_width + semantic_channels, width, 3, padding=1)
        self.act = nn.LeakyReLU(0.2, inplace=False)
        self.rrdb = RRDB(width, config.growth_channels, config.dense_blocks, config.residual_scale)
        self.project = nn.Conv2d(width, width, 3, padding=1)
        nn.init.zeros_(self.project.weight)
        nn.init.zeros_(self.project.bias)

    def forward(self, d, e, sem=None):
        parts = [d, e]
        if self.semantic_channels:
            if sem is None:
                raise ValueError("branch expects semantic features but got none")
            parts.append(sem)
        elif sem is not None:
            raise ValueError("branch does not take semantic features")
        feats = self.rrdb(self.act(self.fuse(torch.cat(parts, dim=1))))
        return d + self.project(feats), feats


class DetailInjector(nn.Module):
    """All injection branches plus a copy of the decoder's output conv."""

    def __init__(self, config: InjectionConfig, codec: ConvCodec):
        super().__init__()
        n = codec.config.num_stages
        if config.num_branches != n - 1:
            raise ValueError(
                f"codec has {n - 1} inject points, config wants {config.num_branches}"
            )
        self.config = config
        ws = codec.config.stage_widths
        branches = []
        for i in range(1, config.num_branches + 1):
            width = ws[n - 1 - i]
            sem_ch = (
                config.semantic_channels
                if config.use_semantic and i in config.semantic_branches
                else 0
            )
            branches.append(InjectionBranch(width, width, sem_ch, config))
        self.branches = nn.ModuleList(branches)
        self.out_conv = nn.Conv2d(ws[0], codec.config.io_channels, 3, padding=1)
        with torch.no_grad():
            self.out_conv.weight.copy_(codec.out_conv.weight)
            self.out_conv.bias.copy_(codec.out_conv.bias)


def decode_with_injection_tensors(
    codec: ConvCodec,
    injector: DetailInjector,
    z: torch.Tensor,
    enc_taps: list[torch.Tensor],
    semantic: torch.Tensor | None = None,
):
    """Torch-side injected decode; returns (image batch, rrdb feature dict)."""
    n = codec.config.num_stages
    if len(enc_taps) != n:
        raise ValueError(f"expected {n} encoder taps, got {len(enc_taps)}")
    needs_sem = any(b.semantic_channels for b in injector.branches)
    if needs_sem and semantic is None:
        raise ValueError("this injector was built with semantic features enabled")
    h = codec.from_latent(z)
    h = codec.dec_stages[0](h)
    features: dict[int, torch.Tensor] = {}
    for i in range(1, n):
        h = codec.dec_stages[i](h)
        branch = injector.branches[i - 1]
        e = enc_taps[n - 1 - i]
        if e.shape[1] != branch.enc_width or e.shape[2:] != h.shape[2:]:
            raise ValueError(
                f"encoder tap {n - 1 - i} has shape {tuple(e.shape)}, expected "
                f"({e.shape[0]}, {branch.enc_width}, {h.shape[2]}, {h.shape[3]}); "
                "taps must come from the paired encoder pass"
            )
        sem_i = None
        if branch.semantic_channels:
            sem_i = F.interpolate(semantic, size=h.shape[2:], mode="nearest")
        h, feats = branch(h, e, sem_i)
        features[i] = feats
    return injector.out_conv(h), features


def decode_with_injection(
    codec: ConvCodec,
    injector: DetailInjector,
    latent: np.ndarray,
    enc_taps: FeatureTapSet,
    semantic: np.ndarray | None = None,
):
    """Decode a latent with detail injection (numpy in, numpy out).

    Returns ``(image, features)`` where ``features`` maps branch index to the
    branch's RRDB output, for inspection or PCA rendering.
    """
    if enc_taps.source != "encoder":
        raise ValueError(f"need encoder taps, got {enc_taps.source!r}")
    taps_t = [image_to_tensor(t) for t in enc_taps.taps]
    sem_t = image_to_tensor(semantic) if semantic is not None else None
    with torch.no_grad():
        out, feats = decode_with_injection_tensors(
            codec, injector, image_to_tensor(latent), taps_t, sem_t
        )
    return tensor_to_image(out), {i: tensor_to_image(f) for i, f in feats.items()}


class SemanticEmbedder(nn.Module):
    """Frozen random patch embedder standing in for a self-supervised ViT.

    Non-overlapping 14-pixel patches are linearly embedded and projected to
    ``out_channels`` with a 1x1 conv.  Weights are random but fixed by
    ``seed``; the embedder never trains, it only has to be the *same*
    function at training and inference time (the seed is stored in the
    stage-two checkpoint metadata for that reason).
    """

    PATCH = 14

    def __init__(self, embed_dim: int = 384, out_channels: int = 256, seed: int = 0):
        super().__init__()
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        self.patch = nn.Conv2d(3, embed_dim, self.PATCH, stride=self.PATCH)
        self.proj = nn.Conv2d(embed_dim, out_channels, 1)
        with torch.no_grad():
            for conv in (self.patch, self.proj):
                fan_in = conv.weight.shape[1] * conv.weight.shape[2] * conv.weight.shape[3]
                conv.weight.normal_(0.0, fan_in**-0.5, generator=gen)
                conv.bias.zero_()
        self.act = nn.GELU()
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        return self.proj(self.act(self.patch(x)))


def semantic_features(image: np.ndarray, embedder: SemanticEmbedder) -> np.ndarray:
    """Patch features on a 1/16-resolution grid.

    The image is first resized to 14/16 of its size with bilinear sampling so
    the 14-pixel patch grid lands exactly on ``(H/16, W/16)`` tokens.
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {image.shape}")
    h, w = image.shape[:2]
    if h % 16 or w % 16:
        raise ValueError(f"image {h}x{w} must be divisible by 16")
    resized = resize(image, (h * 14 // 16, w * 14 // 16), "bilinear")
    with torch.no_grad():
        tokens = embedder(image_to_tensor(resized))
    out = tensor_to_image(tokens)
    assert out.shape[:2] == (h // 16, w // 16)
    return out


def pca_visualize(features: np.ndarray) -> np.ndarray:
    """Project feature channels onto their top three principal components.

    Each component is min-max normalized to [0, 1]; degenerate components
    (fewer than three informative directions, or constant projections) come
    out as zeros.
    """
    if features.ndim != 3:
        raise ValueError(f"expected (H, W, C) features, got shape {features.shape}")
    h, w, c = features.shape
    flat = features.reshape(-1, c).astype(np.float64)
    centered = flat - flat.mean(axis=0, keepdims=True)
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    out = np.zeros((h * w, 3), dtype=np.float64)
    for comp in range(min(3, vt.shape[0])):
        if svals[comp] <= 1e-12 * max(1.0, svals[0]):
            continue
        proj = centered @ vt[comp]
        lo, hi = proj.min(), proj.max()
        if hi > lo:
            out[:, comp] = (proj - lo) / (hi - lo)
    return out.reshape(h, w, 3).astype(np.float32)
