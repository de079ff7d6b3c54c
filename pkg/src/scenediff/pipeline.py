"""Assembly of trained components into a generation pipeline.

All stages write into one checkpoint directory with fixed file names, so
stage ordering can be enforced and a sampler can be reconstructed from the
directory alone. Diffusion runs either directly in pixel space or in the
image codec's latent space; the checkpoint records which.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError, file_checksum, load_checkpoint, save_checkpoint
from .codecs import VQAutoencoder, load_codec
from .diffusion import (
    Condition,
    ConditionalDenoiser,
    DenoiserConfig,
    NoiseSchedule,
    build_condition,
    sample_tensor,
)
from .graph_encoder import GraphEncoder, load_graph_encoder
from .pretraining import GlobalProjection, LatentTokenDecoder
from .sg_core import SceneGraph

IMAGE_CODEC_FILE = "image_codec.pt"
MASK_CODEC_FILE = "mask_codec.pt"
LOCAL_ENCODER_FILE = "encoder_local.pt"
GLOBAL_ENCODER_FILE = "encoder_global.pt"
LOCAL_DECODER_FILE = "decoder_local.pt"
GLOBAL_PROJECTION_FILE = "projection_global.pt"
DIFFUSION_FILE = "diffusion.pt"
DETECTOR_FILE = "detector.pt"

STAGE_REQUIREMENTS = {
    "pretrain-local": [IMAGE_CODEC_FILE],
    "pretrain-global": [MASK_CODEC_FILE],
    "train-diffusion": [LOCAL_ENCODER_FILE, GLOBAL_ENCODER_FILE],
    "sample": [LOCAL_ENCODER_FILE, GLOBAL_ENCODER_FILE, DIFFUSION_FILE],
    "serve": [LOCAL_ENCODER_FILE, GLOBAL_ENCODER_FILE, DIFFUSION_FILE],
}


def missing_checkpoints(checkpoint_dir, stage: str) -> list[str]:
    """Stage-order guard: required checkpoint files absent for a stage."""
    required = STAGE_REQUIREMENTS.get(stage, [])
    root = Path(checkpoint_dir)
    return [name for name in required if not (root / name).exists()]


# --------------------------------------------------------------------------
# save/load for the pre-training artifacts
# --------------------------------------------------------------------------

def save_latent_decoder(path, model: LatentTokenDecoder):
    save_checkpoint(path, kind="latent_decoder", config=model.init_config, state=model.state_dict())


def load_latent_decoder(path) -> LatentTokenDecoder:
    payload = load_checkpoint(path, expected_kind="latent_decoder")
    model = LatentTokenDecoder(**payload["config"])
    model.load_state_dict(payload["state"])
    model.eval()
    return model


def save_global_projection(path, model: GlobalProjection):
    save_checkpoint(path, kind="global_projection", config=model.init_config, state=model.state_dict())


def load_global_projection(path) -> GlobalProjection:
    payload = load_checkpoint(path, expected_kind="global_projection")
    model = GlobalProjection(**payload["config"])
    model.load_state_dict(payload["state"])
    model.eval()
    return model


def save_diffusion_checkpoint(
    path,
    model: ConditionalDenoiser,
    ema: ConditionalDenoiser,
    schedule: NoiseSchedule,
    mode: str,
    sample_shape: tuple[int, int, int],
    latent_scale: float = 1.0,
    train_config: dict | None = None,
):
    if mode not in ("pixel", "latent"):
        raise CheckpointError(f"mode must be 'pixel' or 'latent', got '{mode}'")
    save_checkpoint(
        path,
        kind="diffusion",
        config={
            "denoiser": model.config.to_dict(),
            "betas": schedule.betas.tolist(),
            "mode": mode,
            "sample_shape": list(sample_shape),
            "latent_scale": float(latent_scale),
        },
        state=model.state_dict(),
        extra={"ema_state": ema.state_dict(), "train_config": train_config or {}},
    )


def load_diffusion_checkpoint(path):
    payload = load_checkpoint(path, expected_kind="diffusion")
    config = payload["config"]
    denoiser_config = DenoiserConfig.from_dict(config["denoiser"])
    model = ConditionalDenoiser(denoiser_config)
    model.load_state_dict(payload["state"])
    model.eval()
    ema = ConditionalDenoiser(denoiser_config)
    ema.load_state_dict(payload["extra"]["ema_state"])
    ema.eval()
    schedule = NoiseSchedule(betas=np.asarray(config["betas"], dtype=np.float64))
    return model, ema, schedule, config


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------

class GenerationPipeline:
    """Frozen graph encoders + trained denoiser (EMA weights for sampling),
    optionally behind an image codec when diffusion runs in latent space."""

    def __init__(
        self,
        denoiser: ConditionalDenoiser,
        schedule: NoiseSchedule,
        local_encoder: GraphEncoder,
        global_encoder: GraphEncoder,
        mode: str = "pixel",
        sample_shape: tuple[int, int, int] = (3, 64, 64),
        image_codec: VQAutoencoder | None = None,
        latent_scale: float = 1.0,
        checksum: str | None = None,
    ):
        if mode == "latent" and image_codec is None:
            raise CheckpointError("latent-mode pipeline needs the image codec")
        self.denoiser = denoiser.eval()
        self.schedule = schedule
        self.local_encoder = local_encoder.eval()
        self.global_encoder = global_encoder.eval()
        self.mode = mode
        self.sample_shape = tuple(sample_shape)
        self.image_codec = image_codec
        self.latent_scale = latent_scale
        self.checksum = checksum

    @property
    def condition_dim(self) -> int:
        return self.local_encoder.config.embed_dim + self.global_encoder.config.embed_dim

    def build_condition(self, graph: SceneGraph) -> Condition:
        condition = build_condition(graph, self.local_encoder, self.global_encoder)
        if len(condition.vector) != self.denoiser.config.cond_dim:
            raise CheckpointError(
                f"condition dim {len(condition.vector)} != denoiser expectation "
                f"{self.denoiser.config.cond_dim}"
            )
        return condition

    @torch.no_grad()
    def sample(
        self,
        graph: SceneGraph | None,
        n: int = 4,
        omega: float = 2.0,
        steps: int | None = None,
        seed: int = 0,
    ) -> np.ndarray:
        """Generate n images in [0, 1], (n, H, W, 3); deterministic per seed.

        `graph=None` samples the unconditional branch (null token)."""
        generator = torch.Generator().manual_seed(seed)
        cond = None
        if graph is not None:
            vec = torch.from_numpy(self.build_condition(graph).vector)
            cond = vec.unsqueeze(0).expand(n, -1)
        shape = (n, *self.sample_shape)
        out = sample_tensor(
            self.denoiser, self.schedule, shape, cond, omega=omega, steps=steps,
            generator=generator, x0_clip=1.0 if self.mode == "pixel" else None,
        )
        if self.mode == "latent":
            latents = out / self.latent_scale
            images = self.image_codec.decode_batch(latents)
        else:
            images = (out + 1.0) / 2.0
        images = images.clamp(0.0, 1.0).permute(0, 2, 3, 1).numpy()
        return np.ascontiguousarray(images, dtype=np.float32)

    @torch.no_grad()
    def sample_batch(
        self,
        graphs: list[SceneGraph],
        omega: float = 2.0,
        steps: int | None = None,
        seed: int = 0,
    ) -> np.ndarray:
        """One image per graph, all denoised in a single batched chain.

        With a fixed seed the noise stream depends only on the batch shape,
        so two calls with equally many (possibly edited) graphs share their
        per-row noise: rows are directly comparable across calls.
        """
        generator = torch.Generator().manual_seed(seed)
        cond = torch.stack(
            [torch.from_numpy(self.build_condition(g).vector) for g in graphs]
        )
        shape = (len(graphs), *self.sample_shape)
        out = sample_tensor(
            self.denoiser, self.schedule, shape, cond, omega=omega, steps=steps,
            generator=generator, x0_clip=1.0 if self.mode == "pixel" else None,
        )
        if self.mode == "latent":
            images = self.image_codec.decode_batch(out / self.latent_scale)
        else:
            images = (out + 1.0) / 2.0
        images = images.clamp(0.0, 1.0).permute(0, 2, 3, 1).numpy()
        return np.ascontiguousarray(images, dtype=np.float32)


def condition_vectors(
    graphs: list[SceneGraph], local_encoder: GraphEncoder, global_encoder: GraphEncoder,
    batch_size: int = 64,
) -> np.ndarray:
    """Precompute frozen concat(local, global) embeddings, (N, 2e)."""
    chunks = []
    with torch.no_grad():
        for begin in range(0, len(graphs), batch_size):
            part = graphs[begin : begin + batch_size]
            loc = local_encoder.encode_graphs(part)
            glob = global_encoder.encode_graphs(part)
            chunks.append(torch.cat([loc, glob], dim=1).numpy())
    return np.concatenate(chunks) if chunks else np.zeros((0, 0), dtype=np.float32)


def prepare_diffusion_targets(
    images: np.ndarray, mode: str, image_codec: VQAutoencoder | None = None
) -> tuple[np.ndarray, float]:
    """Diffusion targets from (N, H, W, 3) images in [0, 1].

    Pixel mode scales to [-1, 1]; latent mode encodes through the frozen
    codec and rescales latents to unit standard deviation, returning the
    scale so sampling can invert it.
    """
    if mode == "pixel":
        return (images.astype(np.float32) * 2.0 - 1.0).transpose(0, 3, 1, 2), 1.0
    if mode != "latent":
        raise CheckpointError(f"unknown diffusion mode '{mode}'")
    if image_codec is None:
        raise CheckpointError("latent mode needs the image codec")
    latents = []
    for image in images:
        code = image_codec.encode(image)
        latents.append(code.grid.transpose(2, 0, 1))
    stacked = np.stack(latents).astype(np.float32)
    scale = float(1.0 / (stacked.std() + 1e-8))
    return stacked * scale, scale


def load_pipeline(checkpoint_dir) -> GenerationPipeline:
    root = Path(checkpoint_dir)
    missing = missing_checkpoints(root, "sample")
    if missing:
        raise CheckpointError(f"missing checkpoints in {root}: {', '.join(missing)}")
    _, ema, schedule, config = load_diffusion_checkpoint(root / DIFFUSION_FILE)
    local_encoder = load_graph_encoder(root / LOCAL_ENCODER_FILE)
    global_encoder = load_graph_encoder(root / GLOBAL_ENCODER_FILE)
    image_codec = None
    if config["mode"] == "latent":
        codec_path = root / IMAGE_CODEC_FILE
        if not codec_path.exists():
            raise CheckpointError(f"latent-mode pipeline needs {IMAGE_CODEC_FILE} in {root}")
        image_codec = load_codec(codec_path)
    return GenerationPipeline(
        denoiser=ema,
        schedule=schedule,
        local_encoder=local_encoder,
        global_encoder=global_encoder,
        mode=config["mode"],
        sample_shape=tuple(config["sample_shape"]),
        image_codec=image_codec,
        latent_scale=config.get("latent_scale", 1.0),
        checksum=file_checksum(root / DIFFUSION_FILE),
    )
