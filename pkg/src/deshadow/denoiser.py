"""Image-conditioned latent denoiser.

A small U-Net over latents: the noisy latent and the shadowed image's latent
are concatenated on channels, a sinusoidal timestep embedding is added inside
every residual block, and the bottleneck carries one self-attention block.
The network predicts either the clean latent directly (``z0_pred``) or the
noise (``eps_pred``); :func:`predict_clean` normalizes both to a clean-latent
estimate for the sampler.

The conditioned network is built from an unconditional stem by duplicating
the first convolution's weights across the new channel group and halving
them, so at initialization feeding the same latent through both channel
groups reproduces the unconditional response exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .codec import image_to_tensor, tensor_to_image
from .schedule import NoiseSchedule

__all__ = [
    "DenoiserConfig",
    "LatentDenoiser",
    "build_conditioned_denoiser",
    "expand_conditioning_channels",
    "predict_clean",
    "timestep_embedding",
]

PARAMETERIZATIONS = ("z0_pred", "eps_pred")


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 4
    widths: tuple[int, ...] = (64, 128, 128)
    time_embed_dim: int = 128
    parameterization: str = "z0_pred"

    def __post_init__(self):
        if self.parameterization not in PARAMETERIZATIONS:
            raise ValueError(
                f"parameterization must be one of {PARAMETERIZATIONS}, "
                f"got {self.parameterization!r}"
            )
        if self.latent_channels < 1 or len(self.widths) < 2:
            raise ValueError("need latent_channels >= 1 and at least two widths")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")

    @property
    def in_channels(self) -> int:
        return 2 * self.latent_channels

    def to_dict(self) -> dict:
        return {
            "latent_channels": self.latent_channels,
            "widths": list(self.widths),
            "time_embed_dim": self.time_embed_dim,
            "parameterization": self.parameterization,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10_000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (N, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64) / half
    ).to(t.device)
    args = t.double()[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _norm(width: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(8, width), width)


class TimedResBlock(nn.Module):
    """Residual block with the time embedding added between its convs."""

    def __init__(self, width: int, time_dim: int):
        super().__init__()
        self.in_layers = nn.Sequential(
            _norm(width), nn.SiLU(), nn.Conv2d(width, width, 3, padding=1)
        )
        self.time_proj = nn.Linear(time_dim, width)
        self.out_layers = nn.Sequential(
            _norm(width), nn.SiLU(), nn.Conv2d(width, width, 3, padding=1)
        )

    def forward(self, x, t_emb):
        h = self.in_layers(x)
        h = h + self.time_proj(t_emb)[:, :, None, None]
        return x + self.out_layers(h)


class SelfAttention(nn.Module):
    """Single-head self-attention over spatial positions."""

    def __init__(self, width: int):
        super().__init__()
        self.norm = _norm(width)
        self.qkv = nn.Conv2d(width, width * 3, 1)
        self.out = nn.Conv2d(width, width, 1)

    def forward(self, x):
        n, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(n, 3, c, h * w).unbind(dim=1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(n, c, h, w)
        return x + self.out(out)


class LatentDenoiser(nn.Module):
    """U-Net over latents; ``in_channels`` defaults to the conditioned width."""

    def __init__(self, config: DenoiserConfig, in_channels: int | None = None):
        super().__init__()
        self.config = config
        self.in_channels = config.in_channels if in_channels is None else in_channels
        ws = config.widths
        td = config.time_embed_dim

        self.time_mlp = nn.Sequential(
            nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td)
        )
        self.stem = nn.Conv2d(self.in_channels, ws[0], 3, padding=1)

        self.down_blocks = nn.ModuleList(TimedResBlock(w, td) for w in ws)
        self.downs = nn.ModuleList(
            nn.Conv2d(ws[i], ws[i + 1], 4, stride=2, padding=1)
            for i in range(len(ws) - 1)
        )
        self.mid_attn = SelfAttention(ws[-1])
        self.mid_block = TimedResBlock(ws[-1], td)

        self.ups = nn.ModuleList(
            nn.ConvTranspose2d(ws[i + 1], ws[i], 4, stride=2, padding=1)
            for i in reversed(range(len(ws) - 1))
        )
        self.fuses = nn.ModuleList(
            nn.Conv2d(2 * ws[i], ws[i], 3, padding=1)
            for i in reversed(range(len(ws) - 1))
        )
        self.up_blocks = nn.ModuleList(
            TimedResBlock(ws[i], td) for i in reversed(range(len(ws) - 1))
        )
        self.head = nn.Sequential(
            _norm(ws[0]), nn.SiLU(), nn.Conv2d(ws[0], config.latent_channels, 3, padding=1)
        )

    def forward(self, z_t: torch.Tensor, z_cond: torch.Tensor | None, t) -> torch.Tensor:
        if z_cond is None:
            x = z_t
        else:
            if z_cond.shape != z_t.shape:
                raise ValueError(f"latent shapes differ: {z_t.shape} vs {z_cond.shape}")
            x = torch.cat([z_t, z_cond], dim=1)
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        stride = 2 ** len(self.downs)
        if x.shape[2] % stride or x.shape[3] % stride:
            raise ValueError(
                f"latent spatial size {tuple(x.shape[2:])} must be divisible by "
                f"{stride} (one halving per denoiser stage after the first); use a "
                f"larger crop/image or a shallower `widths`"
            )
        if isinstance(t, int):
            t = torch.full((x.shape[0],), t, dtype=torch.long, device=x.device)
        t_emb = self.time_mlp(
            timestep_embedding(t, self.config.time_embed_dim).to(x.dtype)
        )

        h = self.stem(x)
        skips = []
        for i, block in enumerate(self.down_blocks):
            h = block(h, t_emb)
            if i < len(self.downs):
                skips.append(h)
                h = self.downs[i](h)
        h = self.mid_attn(h)
        h = self.mid_block(h, t_emb)
        for up, fuse, block in zip(self.ups, self.fuses, self.up_blocks):
            h = up(h)
            h = fuse(torch.cat([h, skips.pop()], dim=1))
            h = block(h, t_emb)
        return self.head(h)


def expand_conditioning_channels(weight: torch.Tensor) -> torch.Tensor:
    """Duplicate a conv weight across a second input-channel group, halved.

    The expanded layer applied to the same tensor in both groups reproduces
    the original layer's response.
    """
    if weight.ndim != 4:
        raise ValueError(f"expected a conv weight (O, I, kh, kw), got {tuple(weight.shape)}")
    half = weight * 0.5
    return torch.cat([half, half], dim=1)


def build_conditioned_denoiser(config: DenoiserConfig) -> LatentDenoiser:
    """Construct the conditioned U-Net from an unconditional stem."""
    base = LatentDenoiser(config, in_channels=config.latent_channels)
    state = base.state_dict()
    state["stem.weight"] = expand_conditioning_channels(state["stem.weight"])
    cond = LatentDenoiser(config)
    cond.load_state_dict(state)
    return cond


def predict_clean(
    denoiser: LatentDenoiser,
    z_t: np.ndarray,
    z_cond: np.ndarray,
    t: int,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Clean-latent estimate at timestep ``t``, whatever the parameterization.

    For ``eps_pred`` the raw output is converted with
    ``z_hat = (z_t - sqrt(1 - ab_t) * eps_hat) / sqrt(ab_t)``.
    """
    with torch.no_grad():
        raw = denoiser(image_to_tensor(z_t), image_to_tensor(z_cond), int(t))
    raw = tensor_to_image(raw)
    if denoiser.config.parameterization == "z0_pred":
        return raw
    ab = schedule.alpha_bar(int(t))
    return ((np.asarray(z_t, dtype=np.float64) - math.sqrt(1.0 - ab) * raw)
            / math.sqrt(ab)).astype(np.float32)
