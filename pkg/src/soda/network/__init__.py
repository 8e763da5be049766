from .aggregate import ViewAggregator, aggregate_views
from .encoder import Encoder, EncoderConfig
from .encodings import (
    PosEncodingConfig,
    RayGrid,
    cartesian_to_polar,
    encode_grid,
    polar_to_cartesian,
    pos_encode,
    ray_encode,
    ray_grid_from_camera,
    ray_points,
    timestep_embedding,
)
from .model import ModelConfig, SodaModel, VanillaAutoencoder, build_model
from .unet import (
    MODULATION_VARIANTS,
    AdaGN,
    Denoiser,
    DenoiserConfig,
    build_modulation_variant,
    expand_section_mask,
    section_sizes,
    section_slices,
    site_section,
)
