from .autoencoder import Autoencoder, AutoencoderConfig, Decoder, Encoder, depth_readout
from .checkpoint import load_autoencoder, load_model, save_autoencoder, save_model, state_hash
from .conditional import ConditionalDecoder, ConditionEncoder, ZeroConv, fuse
from .denoiser import Denoiser, DenoiserConfig
from .variants import (
    BUILDERS,
    VARIANTS,
    DepthCompletionModel,
    ScheduleConfig,
    build_early_fusion_conditional_encoder,
    build_early_fusion_frozen,
    build_late_fusion,
    build_unconditional,
)
