"""Self-supervised diffusion: an encoder distills a source view into a compact
latent that steers a denoising UNet through layer-wise feature modulation."""

__version__ = "0.1.0"
