"""Vector-quantized autoencoders for images and masks.

Two instances of the same architecture provide the latent spaces used by
pre-training: an image codec over RGB inputs and a mask codec over one-hot
class tensors. Training uses reconstruction + codebook + commitment terms
(no adversarial or perceptual losses).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .checkpoint import load_checkpoint, save_checkpoint


class CodecError(ValueError):
    pass


class CodecDivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class CodecConfig:
    kind: str                      # "image" | "mask"
    in_channels: int
    downsample: int = 3            # latent is input size / 2^downsample
    latent_channels: int = 8
    codebook_size: int = 256
    base_channels: int = 32
    commitment_weight: float = 0.25

    def __post_init__(self):
        if self.kind not in ("image", "mask"):
            raise CodecError(f"kind must be 'image' or 'mask', got '{self.kind}'")
        for name in ("in_channels", "downsample", "latent_channels", "codebook_size", "base_channels"):
            if getattr(self, name) < 1:
                raise CodecError(f"{name} must be positive")
        if self.commitment_weight <= 0:
            raise CodecError("commitment_weight must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class LatentCode:
    grid: np.ndarray                       # (h, w, c) float32
    codebook_indices: np.ndarray | None    # (h, w) int64, present after quantization
    source: str                            # "image" | "mask"


def quantize(grid: torch.Tensor, codebook: torch.Tensor, commitment_weight: float = 0.25):
    """Snap each vector of `grid` (..., c) to its nearest codebook entry (L2).

    Returns (quantized grid with straight-through gradients, flat index grid,
    vq loss = ||sg(z) - e||^2 + beta * ||z - sg(e)||^2).
    """
    if codebook.numel() == 0:
        raise CodecError("empty codebook")
    flat = grid.reshape(-1, grid.shape[-1])
    distances = torch.cdist(flat, codebook)
    indices = distances.argmin(dim=1)
    quantized = codebook[indices].reshape(grid.shape)
    codebook_loss = F.mse_loss(quantized, grid.detach())
    commitment_loss = F.mse_loss(quantized.detach(), grid)
    vq_loss = codebook_loss + commitment_weight * commitment_loss
    if grid.requires_grad:
        # gradients pass to the encoder as if quantization were the identity;
        # without gradients we return exact codebook entries (idempotence)
        quantized = grid + (quantized - grid).detach()
    return quantized, indices.reshape(grid.shape[:-1]), vq_loss


class VectorQuantizer(nn.Module):
    def __init__(self, codebook_size: int, dim: int, commitment_weight: float = 0.25):
        super().__init__()
        self.commitment_weight = commitment_weight
        self.codebook = nn.Parameter(
            torch.empty(codebook_size, dim).uniform_(-1.0 / codebook_size, 1.0 / codebook_size)
        )

    def forward(self, grid: torch.Tensor):
        return quantize(grid, self.codebook, self.commitment_weight)

    @torch.no_grad()
    def reseed_dead_codes(self, used: torch.Tensor, samples: torch.Tensor, rng: np.random.Generator):
        """Re-init codebook entries unused over an epoch from batch statistics."""
        dead = torch.nonzero(~used).flatten()
        if len(dead) == 0 or len(samples) == 0:
            return 0
        pick = rng.integers(0, len(samples), size=len(dead))
        noise = torch.from_numpy(
            rng.normal(0.0, 0.01, size=(len(dead), samples.shape[1]))
        ).to(samples.dtype)
        self.codebook.data[dead] = samples[pick] + noise
        return len(dead)


def _norm(channels):
    return nn.GroupNorm(min(8, channels), channels)


class _ResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.norm1 = _norm(channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = _norm(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class _DownBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.down = nn.Conv2d(cin, cout, 4, stride=2, padding=1)
        self.res = _ResBlock(cout)

    def forward(self, x):
        return self.res(self.down(x))


class _UpBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.res = _ResBlock(cout)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.res(self.conv(x))


class VQAutoencoder(nn.Module):
    """Conv encoder/decoder around a vector-quantized bottleneck."""

    def __init__(self, config: CodecConfig):
        super().__init__()
        self.config = config
        widths = [config.base_channels * min(2**i, 4) for i in range(config.downsample)]

        enc = [nn.Conv2d(config.in_channels, widths[0], 3, padding=1)]
        prev = widths[0]
        for width in widths:
            enc.append(_DownBlock(prev, width))
            prev = width
        enc.append(nn.Conv2d(prev, config.latent_channels, 1))
        self.encoder = nn.Sequential(*enc)

        dec = [nn.Conv2d(config.latent_channels, prev, 3, padding=1), _ResBlock(prev)]
        for width in reversed(widths):
            dec.append(_UpBlock(prev, width))
            prev = width
        # full-resolution refinement sharpens region boundaries
        dec.append(_ResBlock(prev))
        dec.append(_ResBlock(prev))
        dec.append(nn.Conv2d(prev, config.in_channels, 3, padding=1))
        self.decoder = nn.Sequential(*dec)
        self.quantizer = VectorQuantizer(
            config.codebook_size, config.latent_channels, config.commitment_weight
        )

    def _check_shape(self, x: torch.Tensor):
        factor = 2**self.config.downsample
        if x.shape[1] != self.config.in_channels:
            raise CodecError(
                f"expected {self.config.in_channels} channels, got {x.shape[1]}"
            )
        if x.shape[2] % factor or x.shape[3] % factor:
            raise CodecError(f"spatial dims {tuple(x.shape[2:])} not divisible by {factor}")

    def encode_batch(self, x: torch.Tensor, quantized: bool = True):
        """(B, C, H, W) -> (latent (B, c, h, w), indices (B, h, w), vq_loss)."""
        self._check_shape(x)
        z = self.encoder(x)
        if not quantized:
            return z, None, x.new_zeros(())
        grid = z.permute(0, 2, 3, 1)
        quant, indices, vq_loss = self.quantizer(grid)
        return quant.permute(0, 3, 1, 2), indices, vq_loss

    def decode_batch(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z)

    def forward(self, x: torch.Tensor):
        z, indices, vq_loss = self.encode_batch(x)
        return self.decode_batch(z), indices, vq_loss

    @torch.no_grad()
    def encode(self, array: np.ndarray) -> LatentCode:
        """Single (H, W, C) array in [0, 1] to a quantized LatentCode."""
        self.eval()
        x = torch.from_numpy(np.ascontiguousarray(array, dtype=np.float32))
        x = x.permute(2, 0, 1).unsqueeze(0)
        z, indices, _ = self.encode_batch(x)
        return LatentCode(
            grid=z[0].permute(1, 2, 0).numpy(),
            codebook_indices=indices[0].numpy(),
            source=self.config.kind,
        )

    @torch.no_grad()
    def decode(self, code: LatentCode) -> np.ndarray:
        self.eval()
        z = torch.from_numpy(np.ascontiguousarray(code.grid, dtype=np.float32))
        z = z.permute(2, 0, 1).unsqueeze(0)
        out = self.decode_batch(z)
        return out[0].permute(1, 2, 0).numpy()


def reconstruction_loss(model: VQAutoencoder, x: torch.Tensor) -> torch.Tensor:
    recon, _, vq_loss = model(x)
    return F.mse_loss(recon, x) + vq_loss


def train_codec(
    images: np.ndarray,
    config: CodecConfig,
    epochs: int = 10,
    batch_size: int = 32,
    lr: float = 2e-3,
    seed: int = 0,
    val_images: np.ndarray | None = None,
    label_loss_weight: float = 0.0,
) -> tuple[VQAutoencoder, dict]:
    """Train a codec on (N, H, W, C) arrays in [0, 1].

    `label_loss_weight` adds a cross-entropy term against argmax labels,
    weighted by inverse class frequency so rare classes are not starved;
    useful for mask codecs where the relabeling accuracy matters. Returns
    the trained model (eval mode) and a history dict with per-epoch mean
    train loss and, when a validation set is given, per-epoch val L1.
    Raises CodecDivergenceError if the loss goes non-finite.
    """
    if len(images) == 0:
        raise CodecError("empty dataset")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = VQAutoencoder(config)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    history = {"train_loss": [], "val_l1": []}

    class_weights = None
    if label_loss_weight > 0:
        freq = images.reshape(-1, config.in_channels).mean(axis=0) + 1e-4
        weights = 1.0 / freq
        class_weights = torch.from_numpy(weights / weights.sum() * config.in_channels).float()

    for epoch in range(epochs):
        model.train()
        order = rng.permutation(len(images))
        losses = []
        used = torch.zeros(config.codebook_size, dtype=torch.bool)
        last_latents = None
        for start in range(0, len(images), batch_size):
            batch = images[order[start : start + batch_size]]
            x = torch.from_numpy(batch).permute(0, 3, 1, 2).float()
            z = model.encoder(x)
            grid = z.permute(0, 2, 3, 1)
            quant, indices, vq_loss = model.quantizer(grid)
            recon = model.decode_batch(quant.permute(0, 3, 1, 2))
            loss = F.mse_loss(recon, x) + vq_loss
            if label_loss_weight > 0:
                loss = loss + label_loss_weight * F.cross_entropy(
                    recon, x.argmax(dim=1), weight=class_weights
                )
            if not torch.isfinite(loss):
                raise CodecDivergenceError(
                    f"non-finite loss at epoch {epoch}, step {start // batch_size}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
            used[indices.flatten()] = True
            last_latents = grid.detach().reshape(-1, config.latent_channels)
        model.quantizer.reseed_dead_codes(used, last_latents, rng)
        history["train_loss"].append(float(np.mean(losses)))

        if val_images is not None:
            model.eval()
            with torch.no_grad():
                x = torch.from_numpy(val_images).permute(0, 3, 1, 2).float()
                recon, _, _ = model(x)
                history["val_l1"].append(float((recon - x).abs().mean()))

    model.eval()
    return model, history


def codebook_usage(model: VQAutoencoder, images: np.ndarray) -> int:
    """Number of distinct codebook indices used across a set of inputs."""
    seen = set()
    for image in images:
        code = model.encode(image)
        seen.update(np.unique(code.codebook_indices).tolist())
    return len(seen)


def save_codec(path, model: VQAutoencoder):
    save_checkpoint(path, kind="codec", config=model.config.to_dict(), state=model.state_dict())


def load_codec(path) -> VQAutoencoder:
    payload = load_checkpoint(path, expected_kind="codec")
    model = VQAutoencoder(CodecConfig(**payload["config"]))
    model.load_state_dict(payload["state"])
    model.eval()
    return model
