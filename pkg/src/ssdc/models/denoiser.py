"""Timestep-conditioned latent UNet predicting the velocity ``v``."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .blocks import Downsample, MidBlock, ResBlock, Upsample, norm, timestep_embedding


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 8
    out_channels: int = 4
    width: int = 128
    temb_dim: int = 256

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**d)


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or DenoiserConfig()
        c, td = cfg.width, cfg.temb_dim
        self.time_mlp = nn.Sequential(nn.Linear(c, td), nn.SiLU(), nn.Linear(td, td))
        self.conv_in = nn.Conv2d(cfg.in_channels, c, 3, padding=1)
        self.down1a = ResBlock(c, c, td)
        self.down1b = ResBlock(c, c, td)
        self.down = Downsample(c)
        self.down2 = ResBlock(c, 2 * c, td)
        self.mid = MidBlock(2 * c, td)
        self.up2 = ResBlock(4 * c, 2 * c, td)
        self.up = Upsample(2 * c)
        self.up1a = ResBlock(3 * c, c, td)
        self.up1b = ResBlock(2 * c, c, td)
        self.norm_out = norm(c)
        self.conv_out = nn.Conv2d(c, cfg.out_channels, 3, padding=1)
        # forward-call counter, used to verify step counts of the inference paths
        self.calls = 0

    def forward(self, x: Tensor, t: Tensor | int) -> Tensor:
        if x.dim() != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"denoiser expects [B,{self.cfg.in_channels},h,w], got {tuple(x.shape)}")
        if x.shape[-2] % 2 or x.shape[-1] % 2:
            raise ValueError("latent spatial dims must be even")
        self.calls += 1
        if not torch.is_tensor(t):
            t = torch.full((x.shape[0],), int(t))
        t = t.reshape(-1).expand(x.shape[0]) if t.numel() == 1 else t
        temb = self.time_mlp(timestep_embedding(t, self.cfg.width).to(x.dtype))
        h0 = self.conv_in(x)
        h1 = self.down1b(self.down1a(h0, temb), temb)
        h2 = self.down2(self.down(h1), temb)
        m = self.mid(h2, temb)
        u = self.up2(torch.cat([m, h2], 1), temb)
        u = self.up(u)
        u = self.up1a(torch.cat([u, h1], 1), temb)
        u = self.up1b(torch.cat([u, h0], 1), temb)
        return self.conv_out(F.silu(self.norm_out(u)))

    def widen_input(self, extra: int) -> "Denoiser":
        """Copy of this network accepting ``extra`` more input channels.

        Weights for the new channels start at zero, so the widened network
        initially computes exactly what this one does.
        """
        cfg = DenoiserConfig(self.cfg.in_channels + extra, self.cfg.out_channels, self.cfg.width, self.cfg.temb_dim)
        new = Denoiser(cfg)
        state = {k: v.clone() for k, v in self.state_dict().items()}
        w = state["conv_in.weight"]
        state["conv_in.weight"] = torch.cat([w, w.new_zeros(w.shape[0], extra, *w.shape[2:])], 1)
        new.load_state_dict(state)
        return new
