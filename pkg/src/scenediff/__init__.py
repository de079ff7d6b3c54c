"""Scene-graph conditioned denoising diffusion for controllable scene synthesis."""

__version__ = "0.1.0"
