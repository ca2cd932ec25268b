"""Full single-step depth models: the late-fusion model, the unconditional
baseline and the two early-fusion ablations.

Every variant shares the same frozen autoencoder and the same single-step
formulation (t = T, x_T = 0); they differ only in where the sparse condition
enters the network.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from typing import Literal

import torch
from torch import Tensor, nn

from ..scheduler import NoiseSchedule, make_schedule, predict_x0_from_v
from .autoencoder import Autoencoder, Encoder, depth_readout
from .conditional import ConditionalDecoder
from .denoiser import Denoiser

Variant = Literal["unconditional", "late", "early_frozen", "early_encoder"]
VARIANTS: tuple[str, ...] = ("unconditional", "late", "early_frozen", "early_encoder")


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    kind: str = "linear"

    def build(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end, self.kind)  # type: ignore[arg-type]

    def to_dict(self) -> dict:
        return asdict(self)


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()


class DepthCompletionModel(nn.Module):
    def __init__(
        self,
        variant: Variant,
        autoencoder: Autoencoder,
        denoiser: Denoiser,
        schedule: ScheduleConfig | None = None,
        cond_decoder: ConditionalDecoder | None = None,
        cond_encoder: Encoder | None = None,
        condition_mode: str = "sparse",
    ):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        self.variant = variant
        self.autoencoder = freeze(autoencoder)
        self.denoiser = denoiser
        self.cond_decoder = cond_decoder
        self.cond_encoder = cond_encoder
        self.condition_mode = condition_mode
        self.schedule_cfg = schedule or ScheduleConfig()
        self.schedule = self.schedule_cfg.build()

    # -- configuration -------------------------------------------------------

    @property
    def uses_condition(self) -> bool:
        return self.variant != "unconditional"

    def train(self, mode: bool = True) -> "DepthCompletionModel":
        super().train(mode)
        self.autoencoder.eval()
        return self

    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        """Trainable parameters split into the ``decoder`` (emphasised, higher
        learning rate) and ``unet`` groups."""
        groups: dict[str, list[nn.Parameter]] = {"decoder": [], "unet": []}
        if self.variant == "early_frozen":
            # only the UNet trains, at the higher rate
            groups["decoder"] = [p for p in self.denoiser.parameters() if p.requires_grad]
            return groups
        groups["unet"] = [p for p in self.denoiser.parameters() if p.requires_grad]
        if self.cond_decoder is not None:
            groups["decoder"] = [p for p in self.cond_decoder.parameters() if p.requires_grad]
        if self.cond_encoder is not None:
            groups["decoder"] = [p for p in self.cond_encoder.parameters() if p.requires_grad]
        return groups

    # -- forward pieces --------------------------------------------------------

    def encode_rgb(self, rgb: Tensor) -> Tensor:
        with torch.no_grad():
            return self.autoencoder.encode(rgb)

    def denoiser_input(self, x_t: Tensor, m: Tensor, cond: Tensor | None) -> Tensor:
        parts = [x_t, m]
        if self.variant == "early_frozen":
            with torch.no_grad():
                parts.append(self.autoencoder.encode(cond))
        elif self.variant == "early_encoder":
            parts.append(self.cond_encoder(cond) * self.autoencoder.latent_scale)
        return torch.cat(parts, dim=1)

    def velocity(self, x_t: Tensor, m: Tensor, t: int | Tensor, cond: Tensor | None = None) -> Tensor:
        if x_t.shape != m.shape:
            raise ValueError(f"latent shape mismatch {tuple(x_t.shape)} vs {tuple(m.shape)}")
        if self.variant.startswith("early") and cond is None:
            raise ValueError(f"{self.variant} needs a condition image")
        return self.denoiser(self.denoiser_input(x_t, m, cond), t)

    def predict_latent(self, m: Tensor, cond: Tensor | None = None) -> Tensor:
        """Single-step x0 estimate from x_T = 0 at t = T."""
        T = self.schedule.T
        x_T = torch.zeros_like(m)
        v = self.velocity(x_T, m, T, cond)
        return predict_x0_from_v(x_T, v, T, self.schedule)

    def decode_depth(self, x0: Tensor, cond: Tensor | None = None) -> Tensor:
        if self.variant == "late":
            if cond is None:
                raise ValueError("late fusion needs a condition image")
            return self.cond_decoder(x0, cond)
        return depth_readout(self.autoencoder.decode(x0))

    def forward(self, rgb: Tensor, cond: Tensor | None = None) -> Tensor:
        """Normalized depth [B,H,W] from RGB in [-1,1] and a condition image."""
        m = self.encode_rgb(rgb)
        return self.decode_depth(self.predict_latent(m, cond), cond)


def build_unconditional(ae: Autoencoder, denoiser: Denoiser, schedule: ScheduleConfig | None = None) -> DepthCompletionModel:
    return DepthCompletionModel("unconditional", ae, denoiser, schedule)


def build_late_fusion(ae: Autoencoder, denoiser: Denoiser, schedule: ScheduleConfig | None = None) -> DepthCompletionModel:
    """Conditional decoder initialized from the frozen decoder and encoder."""
    return DepthCompletionModel(
        "late", ae, copy.deepcopy(denoiser), schedule, cond_decoder=ConditionalDecoder.from_autoencoder(ae)
    )


def build_early_fusion_frozen(
    ae: Autoencoder, denoiser: Denoiser, schedule: ScheduleConfig | None = None, condition_mode: str = "sparse"
) -> DepthCompletionModel:
    """Condition encoded by the frozen encoder, fed to the UNet as 4 extra channels.

    ``condition_mode`` is ``"sparse"`` or ``"interpolated"`` (pre-completed by
    barycentric interpolation before encoding).
    """
    if condition_mode not in ("sparse", "interpolated"):
        raise ValueError(f"unknown condition mode {condition_mode!r}")
    widened = denoiser.widen_input(ae.cfg.latent_channels)
    return DepthCompletionModel("early_frozen", ae, widened, schedule, condition_mode=condition_mode)


def build_early_fusion_conditional_encoder(
    ae: Autoencoder, denoiser: Denoiser, schedule: ScheduleConfig | None = None
) -> DepthCompletionModel:
    """Trainable copy of the encoder feeding the UNet through extra channels."""
    widened = denoiser.widen_input(ae.cfg.latent_channels)
    branch = copy.deepcopy(ae.encoder)
    for p in branch.parameters():
        p.requires_grad_(True)
    return DepthCompletionModel("early_encoder", ae, widened, schedule, cond_encoder=branch.train())


BUILDERS = {
    "unconditional": build_unconditional,
    "late": build_late_fusion,
    "early_frozen": build_early_fusion_frozen,
    "early_encoder": build_early_fusion_conditional_encoder,
}
