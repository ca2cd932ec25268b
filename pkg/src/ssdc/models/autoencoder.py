"""Miniature deterministic autoencoder standing in for the frozen image VAE.

Three stride-2 down-samplings give an 8x spatial reduction to a 4-channel
latent. The decoder exposes five intermediate feature maps (after conv-in,
after the mid block, and after each of the three up-sampling stages) through
a ``fuse`` hook so the conditional decoder can inject condition features.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import torch
from torch import Tensor, nn

from .blocks import Downsample, MidBlock, ResBlock, Upsample, norm

FuseHook = Callable[[int, Tensor], Tensor]


@dataclass(frozen=True)
class AutoencoderConfig:
    in_channels: int = 3
    latent_channels: int = 4
    base_width: int = 16
    channel_mult: tuple[int, ...] = (1, 2, 4, 4)

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.base_width * m for m in self.channel_mult)

    @property
    def downsample_factor(self) -> int:
        return 2 ** (len(self.channel_mult) - 1)

    def decoder_feature_channels(self) -> list[int]:
        w = self.widths
        return [w[-1], w[-1]] + [w[i] for i in range(len(w) - 1, 0, -1)]

    def encoder_feature_channels(self) -> list[int]:
        """Channels of the condition-branch features, ordered like the decoder levels."""
        w = self.widths
        return [w[-1]] + [w[i] for i in range(len(w) - 1, -1, -1)]

    def feature_resolutions(self, height: int, width: int) -> list[tuple[int, int]]:
        f = self.downsample_factor
        h, w = height // f, width // f
        n_up = len(self.channel_mult) - 1
        return [(h, w), (h, w)] + [(h * 2**k, w * 2**k) for k in range(1, n_up + 1)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AutoencoderConfig":
        d = dict(d)
        d["channel_mult"] = tuple(d["channel_mult"])
        return cls(**d)


def check_image_dims(x: Tensor, factor: int, channels: int) -> None:
    if x.dim() != 4 or x.shape[1] != channels:
        raise ValueError(f"expected [B,{channels},H,W], got {tuple(x.shape)}")
    if x.shape[-2] % factor or x.shape[-1] % factor:
        raise ValueError(f"spatial dims {tuple(x.shape[-2:])} not divisible by {factor}")


class Encoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig, out_channels: int | None = None):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        self.conv_in = nn.Conv2d(cfg.in_channels, w[0], 3, padding=1)
        self.blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = w[0]
        for i, ch in enumerate(w):
            self.blocks.append(ResBlock(prev, ch))
            prev = ch
            if i < len(w) - 1:
                self.downs.append(Downsample(ch))
        self.mid = MidBlock(prev)
        self.norm_out = norm(prev)
        self.conv_out = nn.Conv2d(prev, out_channels or cfg.latent_channels, 3, padding=1)

    def features(self, x: Tensor) -> list[Tensor]:
        """Block outputs at every resolution plus the mid block, finest first."""
        feats = []
        h = self.conv_in(x)
        for i, block in enumerate(self.blocks):
            h = block(h)
            feats.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)
        feats.append(self.mid(h))
        return feats

    def forward(self, x: Tensor) -> Tensor:
        h = self.features(x)[-1]
        return self.conv_out(torch.nn.functional.silu(self.norm_out(h)))


class Decoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        self.conv_in = nn.Conv2d(cfg.latent_channels, w[-1], 3, padding=1)
        self.mid = MidBlock(w[-1])
        self.blocks = nn.ModuleList()
        self.ups = nn.ModuleList()
        prev = w[-1]
        for i in range(len(w) - 1, -1, -1):
            self.blocks.append(ResBlock(prev, w[i] if i < len(w) - 1 else prev))
            prev = w[i] if i < len(w) - 1 else prev
            if i > 0:
                self.ups.append(Upsample(prev))
        self.norm_out = norm(prev)
        self.conv_out = nn.Conv2d(prev, cfg.in_channels, 3, padding=1)

    def forward(self, z: Tensor, fuse: FuseHook | None = None) -> Tensor:
        hook = fuse or (lambda level, f: f)
        level = 0
        h = hook(level, self.conv_in(z))
        level += 1
        h = hook(level, self.mid(h))
        for i, block in enumerate(self.blocks):
            h = block(h)
            if i < len(self.ups):
                h = self.ups[i](h)
                level += 1
                h = hook(level, h)
        return self.conv_out(torch.nn.functional.silu(self.norm_out(h)))


class Autoencoder(nn.Module):
    """Deterministic encoder/decoder pair; latents are scaled by ``latent_scale``."""

    def __init__(self, cfg: AutoencoderConfig | None = None):
        super().__init__()
        self.cfg = cfg or AutoencoderConfig()
        self.encoder = Encoder(self.cfg)
        self.decoder = Decoder(self.cfg)
        self.register_buffer("latent_scale", torch.ones(()))

    def encode(self, x: Tensor) -> Tensor:
        check_image_dims(x, self.cfg.downsample_factor, self.cfg.in_channels)
        return self.encoder(x) * self.latent_scale

    def decode(self, z: Tensor, fuse: FuseHook | None = None) -> Tensor:
        if z.dim() != 4 or z.shape[1] != self.cfg.latent_channels:
            raise ValueError(f"expected latent [B,{self.cfg.latent_channels},h,w], got {tuple(z.shape)}")
        return self.decoder(z / self.latent_scale, fuse)

    def forward(self, x: Tensor) -> Tensor:
        return self.decode(self.encode(x))


def depth_readout(rgb_like: Tensor) -> Tensor:
    """Depth from the 3-channel decoder output: the channel mean. [B,3,H,W] -> [B,H,W]."""
    return rgb_like.mean(dim=1)
