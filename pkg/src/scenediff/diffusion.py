"""Scene-graph conditioned DDPM.

Forward noising follows x_t = sqrt(a_t) x_0 + sqrt(1 - a_t) eps with a_t the
cumulative product of (1 - beta). Training minimizes the noise-prediction
MSE with the condition replaced by a learned null token at a fixed dropout
rate; sampling runs the ancestral chain (optionally on a strided subset of
steps) with classifier-free guidance.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F


class ScheduleError(ValueError):
    pass


class DiffusionError(ValueError):
    pass


class DiffusionDivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # (T,) float64, strictly inside (0, 1)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) < 1:
            raise ScheduleError("betas must be a non-empty vector")
        if (betas <= 0).any() or (betas >= 1).any():
            raise ScheduleError("betas must lie strictly inside (0, 1)")
        object.__setattr__(self, "betas", betas)

    @classmethod
    def linear(cls, steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        return cls(betas=np.linspace(beta_start, beta_end, steps, dtype=np.float64))

    @property
    def steps(self) -> int:
        return len(self.betas)

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(1.0 - self.betas)

    def alpha_bar(self, t) -> np.ndarray:
        """a_t for 1-indexed t; a_0 is defined as 1 exactly."""
        t = np.asarray(t)
        if (t < 0).any() or (t > self.steps).any():
            raise ScheduleError(f"t out of range [0, {self.steps}]")
        table = np.concatenate([[1.0], self.alpha_bars])
        return table[t]


def diffuse_with_alpha_bar(x0: torch.Tensor, alpha_bar, eps: torch.Tensor) -> torch.Tensor:
    """x_t from an explicit a value (exact at the a=1 and a=0 limits)."""
    a = torch.as_tensor(alpha_bar, dtype=x0.dtype, device=x0.device)
    while a.ndim < x0.ndim:
        a = a.unsqueeze(-1)
    return torch.sqrt(a) * x0 + torch.sqrt(1.0 - a) * eps


def forward_diffuse(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Noise x0 to step t (1-indexed, per-sample when t is a vector)."""
    t = np.asarray(t)
    if (t < 1).any() or (t > schedule.steps).any():
        raise ScheduleError(f"t out of range [1, {schedule.steps}]")
    return diffuse_with_alpha_bar(x0, schedule.alpha_bar(t), eps)


# --------------------------------------------------------------------------
# conditioning
# --------------------------------------------------------------------------

@dataclass
class Condition:
    """Concatenated local+global graph embedding, or the null marker whose
    learned vector lives inside the denoiser."""

    vector: np.ndarray | None
    null_flag: bool = False

    def __post_init__(self):
        if self.null_flag:
            if self.vector is not None:
                raise DiffusionError("null condition carries no vector")
        else:
            vec = np.asarray(self.vector, dtype=np.float32)
            if vec.ndim != 1 or not np.isfinite(vec).all():
                raise DiffusionError("condition vector must be a finite 1-D vector")
            object.__setattr__(self, "vector", vec)

    @classmethod
    def null(cls) -> "Condition":
        return cls(vector=None, null_flag=True)


def build_condition(graph, local_encoder, global_encoder) -> Condition:
    """c = concat(local(G), global(G)); dimension is the sum of the two."""
    with torch.no_grad():
        loc = local_encoder.encode_graph(graph)
        glob = global_encoder.encode_graph(graph)
    return Condition(vector=torch.cat([loc, glob]).numpy())


def apply_condition_dropout(batch_size: int, drop_prob: float, rng: np.random.Generator):
    """Per-sample Bernoulli mask marking conditions replaced by the null token."""
    return rng.random(batch_size) < drop_prob


# --------------------------------------------------------------------------
# denoiser
# --------------------------------------------------------------------------

def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1)
    )
    args = t.float().unsqueeze(1) * freqs.unsqueeze(0)
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class _AdaGNResBlock(nn.Module):
    """Residual block whose group norm is modulated by the (time + condition)
    embedding: scale/shift injection at every resolution."""

    def __init__(self, cin, cout, emb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(min(8, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.modulation = nn.Linear(emb_dim, 2 * cout)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.modulation(emb).chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale[:, :, None, None]) + shift[:, :, None, None]
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class _CrossAttention(nn.Module):
    """Bottleneck cross-attention from spatial tokens to condition tokens."""

    def __init__(self, channels, cond_dim, cond_tokens=4, heads=4):
        super().__init__()
        self.norm = nn.GroupNorm(min(8, channels), channels)
        self.cond_tokens = cond_tokens
        self.to_tokens = nn.Linear(cond_dim, cond_tokens * channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x, cond):
        b, c, h, w = x.shape
        queries = self.norm(x).flatten(2).transpose(1, 2)
        keys = self.to_tokens(cond).reshape(b, self.cond_tokens, c)
        attended, _ = self.attn(queries, keys, keys, need_weights=False)
        return x + self.proj(attended.transpose(1, 2).reshape(b, c, h, w))


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int
    cond_dim: int
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 2)
    emb_dim: int = 128
    cond_tokens: int = 4
    heads: int = 4
    coord_channels: bool = True  # append normalized x/y grids to the input

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["channel_mults"] = list(self.channel_mults)
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["channel_mults"] = tuple(data["channel_mults"])
        return cls(**data)


class ConditionalDenoiser(nn.Module):
    """U-Net noise predictor with adaptive group-norm condition injection at
    every resolution and cross-attention at the bottleneck. The unconditional
    branch uses a learned null vector in condition space, not zeros."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        base, mults = config.base_channels, config.channel_mults
        emb = config.emb_dim
        self.null_condition = nn.Parameter(torch.randn(config.cond_dim) * 0.02)
        self.time_mlp = nn.Sequential(
            nn.Linear(base, emb), nn.SiLU(), nn.Linear(emb, emb)
        )
        self.cond_mlp = nn.Sequential(
            nn.Linear(config.cond_dim, emb), nn.SiLU(), nn.Linear(emb, emb)
        )

        widths = [base * m for m in mults]
        stem_in = config.in_channels + (2 if config.coord_channels else 0)
        self.stem = nn.Conv2d(stem_in, widths[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        for i in range(len(widths) - 1):
            self.down_blocks.append(_AdaGNResBlock(widths[i], widths[i], emb))
            self.downsamplers.append(nn.Conv2d(widths[i], widths[i + 1], 4, stride=2, padding=1))
        self.mid_block1 = _AdaGNResBlock(widths[-1], widths[-1], emb)
        self.mid_attn = _CrossAttention(
            widths[-1], config.cond_dim, config.cond_tokens, config.heads
        )
        self.mid_block2 = _AdaGNResBlock(widths[-1], widths[-1], emb)

        self.up_blocks = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for i in reversed(range(len(widths) - 1)):
            self.upsamplers.append(nn.ConvTranspose2d(widths[i + 1], widths[i], 4, stride=2, padding=1))
            self.up_blocks.append(_AdaGNResBlock(2 * widths[i], widths[i], emb))
        self.out_norm = nn.GroupNorm(min(8, widths[0]), widths[0])
        self.out_conv = nn.Conv2d(widths[0], config.in_channels, 3, padding=1)

    def resolve_condition(self, batch_size, cond: torch.Tensor | None, null_mask=None):
        null = self.null_condition.unsqueeze(0).expand(batch_size, -1)
        if cond is None:
            return null
        if null_mask is None:
            return cond
        mask = torch.as_tensor(null_mask, dtype=torch.bool).unsqueeze(1)
        return torch.where(mask, null, cond)

    def forward(self, x, t, cond: torch.Tensor | None = None, null_mask=None):
        """Predict the injected noise for x at steps t (1-indexed tensor).

        `cond=None` or a true entry in `null_mask` selects the learned
        unconditional token for that sample.
        """
        if x.ndim != 4:
            raise DiffusionError("x must be (B, C, H, W)")
        t = torch.as_tensor(t, dtype=torch.long, device=x.device).reshape(-1)
        if len(t) == 1 and x.shape[0] > 1:
            t = t.expand(x.shape[0])
        cond_vec = self.resolve_condition(x.shape[0], cond, null_mask)
        emb = self.time_mlp(sinusoidal_embedding(t, self.config.base_channels))
        emb = emb + self.cond_mlp(cond_vec)

        if self.config.coord_channels:
            b, _, height, width = x.shape
            ys = torch.linspace(0.0, 1.0, height, dtype=x.dtype, device=x.device)
            xs = torch.linspace(0.0, 1.0, width, dtype=x.dtype, device=x.device)
            grid_y = ys.reshape(1, 1, height, 1).expand(b, 1, height, width)
            grid_x = xs.reshape(1, 1, 1, width).expand(b, 1, height, width)
            x = torch.cat([x, grid_x, grid_y], dim=1)
        h = self.stem(x)
        skips = []
        for block, down in zip(self.down_blocks, self.downsamplers):
            h = block(h, emb)
            skips.append(h)
            h = down(h)
        h = self.mid_block1(h, emb)
        h = self.mid_attn(h, cond_vec)
        h = self.mid_block2(h, emb)
        for up, block in zip(self.upsamplers, self.up_blocks):
            h = up(h)
            h = block(torch.cat([h, skips.pop()], dim=1), emb)
        return self.out_conv(F.silu(self.out_norm(h)))


# --------------------------------------------------------------------------
# losses and guidance
# --------------------------------------------------------------------------

def ddm_loss(
    x0: torch.Tensor,
    cond: torch.Tensor,
    model: nn.Module,
    schedule: NoiseSchedule,
    drop_prob: float = 0.2,
    rng: np.random.Generator | None = None,
    noise_generator: torch.Generator | None = None,
):
    """Noise-prediction MSE with condition dropout.

    t is sampled uniformly in [1, T] per sample; with probability
    `drop_prob` a sample's condition is replaced by the learned null token.
    Returns (loss, info) where info carries the sampled t and dropout mask.
    """
    rng = rng or np.random.default_rng()
    batch = x0.shape[0]
    t = rng.integers(1, schedule.steps + 1, size=batch)
    eps = torch.randn(x0.shape, generator=noise_generator, dtype=x0.dtype)
    x_t = forward_diffuse(x0, t, eps, schedule)
    null_mask = apply_condition_dropout(batch, drop_prob, rng)
    pred = model(x_t, torch.from_numpy(t), cond, null_mask=null_mask)
    loss = F.mse_loss(pred, eps)
    if not torch.isfinite(loss):
        raise DiffusionDivergenceError("non-finite diffusion loss")
    return loss, {"t": t, "dropped": null_mask}


def cfg_predict(model, x_t: torch.Tensor, t, cond: torch.Tensor, omega: float) -> torch.Tensor:
    """(1 + omega) * eps(x, t, c) - omega * eps(x, t) per classifier-free
    guidance; omega = 0 returns the conditional prediction unchanged."""
    conditional = model(x_t, t, cond)
    if omega == 0:
        return conditional
    unconditional = model(x_t, t, None)
    return (1.0 + omega) * conditional - omega * unconditional


def strided_timesteps(total: int, steps: int | None) -> list[int]:
    """Descending 1-indexed timesteps; the full [T..1] chain when steps is
    None, otherwise an evenly strided subset that always ends at 1."""
    if steps is None or steps >= total:
        return list(range(total, 0, -1))
    if steps < 1:
        raise DiffusionError("steps must be >= 1")
    picks = np.unique(np.linspace(1, total, steps).round().astype(int))
    return sorted((int(p) for p in picks), reverse=True)


@torch.no_grad()
def sample_tensor(
    model,
    schedule: NoiseSchedule,
    shape: tuple,
    cond: torch.Tensor | None,
    omega: float = 2.0,
    steps: int | None = None,
    generator: torch.Generator | None = None,
    x0_clip: float | None = 1.0,
) -> torch.Tensor:
    """Ancestral sampling from t = T to 1 (optionally strided), returning the
    final x0-space tensor (not yet mapped to [0, 1])."""
    timesteps = strided_timesteps(schedule.steps, steps)
    x = torch.randn(shape, generator=generator)
    for i, t in enumerate(timesteps):
        s = timesteps[i + 1] if i + 1 < len(timesteps) else 0
        a_t = float(schedule.alpha_bar(t))
        a_s = float(schedule.alpha_bar(s))
        if cond is None:
            eps_hat = model(x, torch.full((shape[0],), t), None)
        else:
            eps_hat = cfg_predict(model, x, torch.full((shape[0],), t), cond, omega)
        x0_hat = (x - math.sqrt(1.0 - a_t) * eps_hat) / math.sqrt(a_t)
        if x0_clip is not None:
            x0_hat = x0_hat.clamp(-x0_clip, x0_clip)
        alpha_ts = a_t / a_s
        coef_x0 = math.sqrt(a_s) * (1.0 - alpha_ts) / (1.0 - a_t)
        coef_xt = math.sqrt(alpha_ts) * (1.0 - a_s) / (1.0 - a_t)
        x = coef_x0 * x0_hat + coef_xt * x
        if s > 0:
            var = (1.0 - alpha_ts) * (1.0 - a_s) / (1.0 - a_t)
            x = x + math.sqrt(var) * torch.randn(shape, generator=generator)
    return x


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DiffusionTrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 2e-4
    ema_decay: float = 0.999
    drop_prob: float = 0.2
    seed: int = 0

    def to_dict(self):
        return dataclasses.asdict(self)


def train_diffusion(
    x0: np.ndarray,
    cond: np.ndarray,
    model: ConditionalDenoiser,
    schedule: NoiseSchedule,
    config: DiffusionTrainConfig,
    val_x0: np.ndarray | None = None,
    val_cond: np.ndarray | None = None,
) -> tuple[ConditionalDenoiser, ConditionalDenoiser, dict]:
    """Train the denoiser on (N, C, H, W) data in [-1, 1] with precomputed
    condition vectors (N, cond_dim). Returns (model, EMA copy, history);
    validation loss uses a fixed evaluation stream so epochs are comparable.
    """
    if len(x0) == 0:
        raise DiffusionError("empty dataset")
    if len(x0) != len(cond):
        raise DiffusionError("conditions must align with samples")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)

    import copy

    ema = copy.deepcopy(model)
    for p in ema.parameters():
        p.requires_grad_(False)

    def ema_update():
        with torch.no_grad():
            for p_ema, p in zip(ema.parameters(), model.parameters()):
                p_ema.mul_(config.ema_decay).add_(p, alpha=1.0 - config.ema_decay)
            for b_ema, b in zip(ema.buffers(), model.buffers()):
                b_ema.copy_(b)

    def val_loss():
        if val_x0 is None:
            return None
        model.eval()
        with torch.no_grad():
            loss, _ = ddm_loss(
                torch.from_numpy(val_x0).float(),
                torch.from_numpy(val_cond).float(),
                model,
                schedule,
                drop_prob=0.0,
                rng=np.random.default_rng(12345),
                noise_generator=torch.Generator().manual_seed(12345),
            )
        return float(loss)

    history = {"train_loss": [], "val_loss": []}
    start = val_loss()
    if start is not None:
        history["val_loss"].append(start)

    x0_t = torch.from_numpy(x0).float()
    cond_t = torch.from_numpy(cond).float()
    for epoch in range(config.epochs):
        model.train()
        order = rng.permutation(len(x0))
        losses = []
        for begin in range(0, len(order), config.batch_size):
            rows = torch.from_numpy(order[begin : begin + config.batch_size].copy())
            loss, _ = ddm_loss(
                x0_t[rows], cond_t[rows], model, schedule,
                drop_prob=config.drop_prob, rng=rng, noise_generator=gen,
            )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            ema_update()
            losses.append(loss.item())
        history["train_loss"].append(float(np.mean(losses)))
        val = val_loss()
        if val is not None:
            history["val_loss"].append(val)

    model.eval(), ema.eval()
    return model, ema, history
