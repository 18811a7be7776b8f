"""Training losses for both stages.

Stage one is plain MSE between predicted and target clean latents.  Stage two
combines an L1 pixel term with a perceptual term: squared differences of
channel-unit-normalized features from a frozen, randomly initialized conv
pyramid, averaged per layer and summed with unit layer weights.

Any module exposing ``features(batch) -> list[Tensor]`` and a
``layer_weights`` sequence can replace :class:`PerceptualExtractor` (for
example a pretrained perceptual backbone); the loss only uses that interface.

Functions accept (N, C, H, W) torch tensors or (H, W, C) numpy images.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

__all__ = [
    "stage_one_loss",
    "PerceptualExtractor",
    "unit_normalize",
    "perceptual_distance",
    "stage_two_loss",
]


def _as_batch(x) -> torch.Tensor:
    if isinstance(x, np.ndarray):
        if x.ndim != 3:
            raise ValueError(f"expected (H, W, C) array, got shape {x.shape}")
        x = torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1)))[None]
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"expected a batched tensor, got shape {tuple(x.shape)}")
    return x


def stage_one_loss(pred, target) -> torch.Tensor:
    """Mean squared error over all latent elements."""
    if isinstance(pred, np.ndarray):
        pred = torch.from_numpy(pred)
    if isinstance(target, np.ndarray):
        target = torch.from_numpy(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


class PerceptualExtractor(nn.Module):
    """Frozen random five-stage conv pyramid with unit layer weights."""

    def __init__(self, widths=(16, 32, 64, 64, 64), in_channels: int = 3, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        convs = []
        prev = in_channels
        for i, w in enumerate(widths):
            conv = nn.Conv2d(prev, w, 3, stride=1 if i == 0 else 2, padding=1)
            fan_in = prev * 9
            with torch.no_grad():
                conv.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
                conv.bias.zero_()
            convs.append(conv)
            prev = w
        self.convs = nn.ModuleList(convs)
        self.act = nn.SiLU()
        self.layer_weights = tuple(1.0 for _ in widths)
        self.requires_grad_(False)
        self.eval()

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        for conv in self.convs:
            h = self.act(conv(h))
            feats.append(h)
        return feats


def unit_normalize(feat: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    """Scale each feature vector to unit length along the channel axis."""
    norm = torch.sqrt((feat**2).sum(dim=1, keepdim=True) + eps)
    return feat / norm


def perceptual_distance(a, b, extractor) -> torch.Tensor:
    """Feature-space distance between two images or batches."""
    a, b = _as_batch(a), _as_batch(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    total = None
    feats_a = extractor.features(a)
    feats_b = extractor.features(b)
    for fa, fb, w in zip(feats_a, feats_b, extractor.layer_weights):
        d = ((unit_normalize(fa) - unit_normalize(fb)) ** 2).mean() * w
        total = d if total is None else total + d
    return total


def stage_two_loss(pred, target, extractor, lambda_p: float = 1.0) -> torch.Tensor:
    """L1 reconstruction plus ``lambda_p`` times the perceptual distance."""
    pred_b, target_b = _as_batch(pred), _as_batch(target)
    if pred_b.shape != target_b.shape:
        raise ValueError(
            f"shape mismatch: {tuple(pred_b.shape)} vs {tuple(target_b.shape)}"
        )
    l1 = (pred_b - target_b).abs().mean()
    return l1 + lambda_p * perceptual_distance(pred_b, target_b, extractor)
