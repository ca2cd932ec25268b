"""Late-fusion conditional decoder.

The condition branch has the encoder's architecture and starts from its
weights; its five feature maps line up with the decoder's five fusion
levels. At each level the decoder feature is updated residually::

    f = f_dec + ZeroConv1x1(f_dec ++ f_cond)

so with the fusion convolutions at zero the conditional decoder reproduces
the plain decoder bit for bit.
"""

from __future__ import annotations

import copy

import torch
from torch import Tensor, nn

from .autoencoder import Autoencoder, AutoencoderConfig, Decoder, Encoder, check_image_dims, depth_readout


class ZeroConv(nn.Conv2d):
    """1x1 convolution with weight and bias initialized to exactly zero."""

    def __init__(self, cin: int, cout: int):
        super().__init__(cin, cout, 1)
        nn.init.zeros_(self.weight)
        nn.init.zeros_(self.bias)


def fuse(f_dec: Tensor, f_cond: Tensor, conv: nn.Conv2d) -> Tensor:
    if f_dec.shape[0] != f_cond.shape[0] or f_dec.shape[-2:] != f_cond.shape[-2:]:
        raise ValueError(f"cannot fuse {tuple(f_dec.shape)} with {tuple(f_cond.shape)}")
    return f_dec + conv(torch.cat([f_dec, f_cond], dim=1))


class ConditionEncoder(nn.Module):
    """Condition feature extractor; returns five maps ordered coarse to fine."""

    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        self.cfg = cfg
        self.body = Encoder(cfg)
        # the latent head is unused here
        del self.body.norm_out, self.body.conv_out

    @classmethod
    def from_encoder(cls, encoder: Encoder) -> "ConditionEncoder":
        branch = cls(encoder.cfg)
        state = {k: v for k, v in encoder.state_dict().items() if not k.startswith(("norm_out", "conv_out"))}
        branch.body.load_state_dict(state)
        return branch

    def forward(self, cond: Tensor) -> list[Tensor]:
        check_image_dims(cond, self.cfg.downsample_factor, self.cfg.in_channels)
        feats = self.body.features(cond)  # fine ... coarse, mid last
        return [feats[-1]] + feats[-2::-1]


class ConditionalDecoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        self.cfg = cfg
        self.decoder = Decoder(cfg)
        self.condition = ConditionEncoder(cfg)
        self.fusions = nn.ModuleList(
            ZeroConv(cd + cc, cd)
            for cd, cc in zip(cfg.decoder_feature_channels(), cfg.encoder_feature_channels())
        )
        self.register_buffer("latent_scale", torch.ones(()))

    @classmethod
    def from_autoencoder(cls, ae: Autoencoder) -> "ConditionalDecoder":
        dc = cls(ae.cfg)
        dc.decoder.load_state_dict(copy.deepcopy(ae.decoder.state_dict()))
        dc.condition = ConditionEncoder.from_encoder(ae.encoder)
        dc.latent_scale.copy_(ae.latent_scale)
        return dc

    def condition_features(self, cond: Tensor) -> list[Tensor]:
        return self.condition(cond)

    def forward(self, z: Tensor, cond: Tensor) -> Tensor:
        """Normalized depth [B,H,W] from latent ``z`` and condition image ``cond`` [B,3,H,W]."""
        f = self.cfg.downsample_factor
        if cond.shape[-2] != z.shape[-2] * f or cond.shape[-1] != z.shape[-1] * f:
            raise ValueError(f"condition {tuple(cond.shape[-2:])} does not match latent {tuple(z.shape[-2:])} x{f}")
        feats = self.condition_features(cond)

        def hook(level: int, h: Tensor) -> Tensor:
            return fuse(h, feats[level], self.fusions[level])

        return depth_readout(self.decoder(z / self.latent_scale, hook))
