"""Dual pre-training of the scene-graph encoders.

The local encoder learns fine-grained content: a random present class is
blanked out of the image by its bounding box, and the encoder (jointly with
a transformer decoder over latent tokens) must predict the clean image
latent from the masked latent plus the graph. The global encoder learns
layout: its embeddings are contrastively aligned with segmentation-mask
latents, with negatives drawn dataset-wide from samples whose serialized
graph differs. Alignment happens against mask latents rather than image
latents, so nuisance appearance shared within a video cannot carry the
task.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .codecs import VQAutoencoder
from .data import Triplet, mask_to_onehot
from .graph_encoder import EncoderConfig, GraphBatch, GraphEncoder
from .sg_core import SceneGraph, SegmentationMask, serialize_graph


class PretrainError(ValueError):
    pass


class PretrainDivergenceError(RuntimeError):
    pass


MASK_FILL_VALUE = 0.5


@dataclass
class MaskedSample:
    full_image: np.ndarray      # (H, W, 3)
    masked_image: np.ndarray    # same, class bbox filled with the constant
    target_class: int
    bbox: tuple[int, int, int, int]  # (x0, y0, x1, y1) pixels, half-open


@dataclass
class ContrastiveBatch:
    graph: SceneGraph
    positive_mask_latent: torch.Tensor        # flattened
    negative_mask_latents: list[torch.Tensor]

    def __post_init__(self):
        if len(self.negative_mask_latents) < 1:
            raise PretrainError("need at least one negative")


def mask_random_class_region(
    image: np.ndarray,
    mask: SegmentationMask,
    rng: np.random.Generator,
    excluded_classes=(),
    fill: float = MASK_FILL_VALUE,
) -> MaskedSample | None:
    """Blank the bounding box of a uniformly chosen present class.

    Returns None when no maskable class is present (skip-sample signal).
    """
    excluded = set(excluded_classes)
    present = [int(c) for c in np.unique(mask.labels) if int(c) not in excluded]
    if not present:
        return None
    target = int(rng.choice(present))
    rows, cols = np.nonzero(mask.labels == target)
    bbox = (int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1)
    masked = image.copy()
    masked[bbox[1] : bbox[3], bbox[0] : bbox[2], :] = fill
    return MaskedSample(full_image=image, masked_image=masked, target_class=target, bbox=bbox)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def local_loss(
    z_x: torch.Tensor, z_x_r: torch.Tensor, z_g_loc: torch.Tensor, decoder: nn.Module
) -> torch.Tensor:
    """Mean squared error between the clean latent and its prediction from
    the masked latent plus the graph embedding, averaged over elements."""
    if z_x.shape != z_x_r.shape:
        raise PretrainError(f"latent shapes differ: {tuple(z_x.shape)} vs {tuple(z_x_r.shape)}")
    prediction = decoder(z_x_r, z_g_loc)
    if prediction.shape != z_x.shape:
        raise PretrainError(
            f"decoder output shape {tuple(prediction.shape)} != target {tuple(z_x.shape)}"
        )
    return (z_x - prediction).square().mean()


def global_loss(
    z_g: torch.Tensor, z_m_pos: torch.Tensor, z_m_negs: torch.Tensor
) -> torch.Tensor:
    """-log( exp(z_g.z+) / (exp(z_g.z+) + sum_i exp(z_g.z-_i)) ), stabilized.

    Raw dot-product logits; any normalization or scaling belongs to the
    embedding heads, not the loss.
    """
    pos = (z_g * z_m_pos).sum()
    negs = (z_m_negs * z_g).sum(dim=-1)
    logits = torch.cat([pos.reshape(1), negs.reshape(-1)])
    return torch.logsumexp(logits, dim=0) - pos


class LatentTokenDecoder(nn.Module):
    """Transformer over flattened latent tokens with the graph embedding
    prepended as a conditioning token; predicts the clean latent grid."""

    def __init__(
        self,
        latent_channels: int,
        latent_size: int,
        embed_dim: int,
        width: int = 256,
        blocks: int = 4,
        heads: int = 4,
    ):
        super().__init__()
        self.init_config = {
            "latent_channels": latent_channels, "latent_size": latent_size,
            "embed_dim": embed_dim, "width": width, "blocks": blocks, "heads": heads,
        }
        self.latent_channels = latent_channels
        self.latent_size = latent_size
        self.token_in = nn.Linear(latent_channels, width)
        self.cond_in = nn.Linear(embed_dim, width)
        self.pos = nn.Parameter(torch.randn(latent_size * latent_size, width) * 0.02)
        layer = nn.TransformerEncoderLayer(
            d_model=width,
            nhead=heads,
            dim_feedforward=2 * width,
            batch_first=True,
            dropout=0.0,
            norm_first=True,
        )
        self.blocks = nn.TransformerEncoder(layer, num_layers=blocks)
        self.token_out = nn.Linear(width, latent_channels)

    def forward(self, z_r: torch.Tensor, z_g: torch.Tensor) -> torch.Tensor:
        """(B, c, h, w) masked latent + (B, e) embedding -> (B, c, h, w)."""
        single = z_r.ndim == 3
        if single:
            z_r, z_g = z_r.unsqueeze(0), z_g.unsqueeze(0)
        b, c, h, w = z_r.shape
        tokens = self.token_in(z_r.flatten(2).transpose(1, 2)) + self.pos
        cond = self.cond_in(z_g).unsqueeze(1)
        out = self.blocks(torch.cat([cond, tokens], dim=1))[:, 1:]
        out = self.token_out(out).transpose(1, 2).reshape(b, c, h, w)
        return out[0] if single else out


class GlobalProjection(nn.Module):
    """Maps flattened mask latents and graph embeddings into the shared
    contrastive space: L2-normalized and scaled by one learned scalar, or
    raw in strict mode."""

    def __init__(self, mask_latent_dim: int, embed_dim: int, normalize: bool = True):
        super().__init__()
        self.init_config = {
            "mask_latent_dim": mask_latent_dim, "embed_dim": embed_dim, "normalize": normalize,
        }
        self.mask_proj = nn.Linear(mask_latent_dim, embed_dim)
        self.normalize = normalize
        self.log_scale = nn.Parameter(torch.tensor(np.log(10.0), dtype=torch.float32))

    def _finish(self, vec: torch.Tensor) -> torch.Tensor:
        if not self.normalize:
            return vec
        scale = torch.sqrt(torch.exp(self.log_scale))
        return scale * F.normalize(vec, dim=-1)

    def graph_side(self, z_g: torch.Tensor) -> torch.Tensor:
        return self._finish(z_g)

    def mask_side(self, z_m_flat: torch.Tensor) -> torch.Tensor:
        return self._finish(self.mask_proj(z_m_flat))


# --------------------------------------------------------------------------
# training configs
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LocalPretrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    embed_dim: int = 256
    hidden_dim: int = 128
    gnn_layers: int = 3
    decoder_width: int = 256
    decoder_blocks: int = 4
    decoder_heads: int = 4
    excluded_classes: tuple[int, ...] = ()

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["excluded_classes"] = list(self.excluded_classes)
        return out


@dataclass(frozen=True)
class GlobalPretrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    embed_dim: int = 256
    hidden_dim: int = 128
    gnn_layers: int = 3
    negatives: int = 7
    normalize: bool = True    # strict-paper mode when False

    def to_dict(self):
        return dataclasses.asdict(self)


def _encode_image_latent(codec: VQAutoencoder, image: np.ndarray) -> torch.Tensor:
    code = codec.encode(image)
    return torch.from_numpy(code.grid).permute(2, 0, 1).contiguous()


def _class_count(triplets: list[Triplet]) -> int:
    return triplets[0].mask.class_count


# --------------------------------------------------------------------------
# local pre-training
# --------------------------------------------------------------------------

def precompute_masked_latents(
    triplets: list[Triplet], image_codec: VQAutoencoder, excluded_classes=()
):
    """Per-sample clean latent plus one masked latent per maskable class.

    The codec is frozen; masked variants are enumerated once so epochs only
    sample among them.
    """
    excluded = set(excluded_classes)
    clean, masked = [], []
    for triplet in triplets:
        clean.append(_encode_image_latent(image_codec, triplet.image))
        variants = {}
        present = [int(c) for c in np.unique(triplet.mask.labels) if int(c) not in excluded]
        for target in present:
            rows, cols = np.nonzero(triplet.mask.labels == target)
            img = triplet.image.copy()
            img[rows.min() : rows.max() + 1, cols.min() : cols.max() + 1, :] = MASK_FILL_VALUE
            variants[target] = _encode_image_latent(image_codec, img)
        masked.append(variants)
    return clean, masked


def pretrain_local(
    triplets: list[Triplet],
    image_codec: VQAutoencoder,
    config: LocalPretrainConfig,
    val_triplets: list[Triplet] | None = None,
    condition_on_graph: bool = True,
) -> tuple[GraphEncoder, LatentTokenDecoder, dict]:
    """Train the local graph encoder with the latent-reconstruction task.

    `condition_on_graph=False` trains the ablation baseline whose decoder
    sees a zero embedding instead of the graph.
    """
    if not triplets:
        raise PretrainError("empty dataset")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    feature_dim = _class_count(triplets) + 4
    encoder = GraphEncoder(
        EncoderConfig(
            feature_dim=feature_dim,
            hidden_dim=config.hidden_dim,
            embed_dim=config.embed_dim,
            layers=config.gnn_layers,
        )
    )
    clean, masked = precompute_masked_latents(triplets, image_codec, config.excluded_classes)
    keep = [i for i, variants in enumerate(masked) if variants]
    if not keep:
        raise PretrainError("no maskable classes anywhere in the dataset")
    latent_size = clean[0].shape[-1]
    decoder = LatentTokenDecoder(
        latent_channels=clean[0].shape[0],
        latent_size=latent_size,
        embed_dim=config.embed_dim,
        width=config.decoder_width,
        blocks=config.decoder_blocks,
        heads=config.decoder_heads,
    )

    val_data = None
    if val_triplets:
        val_clean, val_masked = precompute_masked_latents(
            val_triplets, image_codec, config.excluded_classes
        )
        val_rng = np.random.default_rng(config.seed + 1)
        val_data = []
        for i, variants in enumerate(val_masked):
            if not variants:
                continue
            target = int(val_rng.choice(sorted(variants)))
            val_data.append((val_clean[i], variants[target], val_triplets[i].graph))

    params = list(encoder.parameters()) + list(decoder.parameters())
    optimizer = torch.optim.Adam(params, lr=config.lr)
    history = {"train_loss": [], "val_loss": []}

    def eval_val():
        if not val_data:
            return None
        encoder.eval(), decoder.eval()
        with torch.no_grad():
            z_x = torch.stack([v[0] for v in val_data])
            z_r = torch.stack([v[1] for v in val_data])
            z_g = encoder.encode_graphs([v[2] for v in val_data])
            if not condition_on_graph:
                z_g = torch.zeros_like(z_g)
            return float(local_loss(z_x, z_r, z_g, decoder))

    start = eval_val()
    if start is not None:
        history["val_loss"].append(start)

    for epoch in range(config.epochs):
        encoder.train(), decoder.train()
        order = rng.permutation(len(keep))
        losses = []
        for begin in range(0, len(order), config.batch_size):
            rows = [keep[i] for i in order[begin : begin + config.batch_size]]
            z_x = torch.stack([clean[i] for i in rows])
            z_r = torch.stack(
                [masked[i][int(rng.choice(sorted(masked[i])))] for i in rows]
            )
            z_g = encoder.encode_graphs([triplets[i].graph for i in rows])
            if not condition_on_graph:
                z_g = torch.zeros_like(z_g)
            loss = local_loss(z_x, z_r, z_g, decoder)
            if not torch.isfinite(loss):
                raise PretrainDivergenceError(f"non-finite local loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        history["train_loss"].append(float(np.mean(losses)))
        val = eval_val()
        if val is not None:
            history["val_loss"].append(val)

    encoder.eval(), decoder.eval()
    return encoder, decoder, history


# --------------------------------------------------------------------------
# global pre-training
# --------------------------------------------------------------------------

def precompute_mask_latents(
    triplets: list[Triplet], mask_codec: VQAutoencoder
) -> torch.Tensor:
    """Flattened quantized mask latents, stacked (N, h*w*c). Codec frozen."""
    flats = []
    for triplet in triplets:
        code = mask_codec.encode(mask_to_onehot(triplet.mask))
        flats.append(torch.from_numpy(code.grid).flatten())
    return torch.stack(flats)


def draw_contrastive_sample(
    idx: int,
    triplets: list[Triplet],
    latents: torch.Tensor,
    serialized: list[str],
    k: int,
    rng: np.random.Generator,
) -> ContrastiveBatch:
    """Anchor graph + its mask latent + k dataset-wide negatives whose
    serialized graph differs from the anchor's."""
    negatives = []
    guard = 0
    while len(negatives) < k:
        j = int(rng.integers(0, len(triplets)))
        if serialized[j] != serialized[idx]:
            negatives.append(latents[j])
        guard += 1
        if guard > 200 * k:
            raise PretrainError("could not draw negatives: graphs are all identical")
    return ContrastiveBatch(
        graph=triplets[idx].graph,
        positive_mask_latent=latents[idx],
        negative_mask_latents=negatives,
    )


def retrieval_accuracy(
    encoder: GraphEncoder,
    projection: GlobalProjection,
    triplets: list[Triplet],
    latents: torch.Tensor,
    serialized: list[str],
    k: int,
    rng: np.random.Generator,
) -> float:
    """Top-1 rate of the true mask latent among k+1 candidates per graph."""
    encoder.eval(), projection.eval()
    hits = 0
    with torch.no_grad():
        z_g = projection.graph_side(encoder.encode_graphs([t.graph for t in triplets]))
        for i in range(len(triplets)):
            batch = draw_contrastive_sample(i, triplets, latents, serialized, k, rng)
            candidates = torch.stack(
                [batch.positive_mask_latent] + batch.negative_mask_latents
            )
            scores = projection.mask_side(candidates) @ z_g[i]
            hits += int(scores.argmax()) == 0
    return hits / len(triplets)


def pretrain_global(
    triplets: list[Triplet],
    mask_codec: VQAutoencoder,
    config: GlobalPretrainConfig,
    val_triplets: list[Triplet] | None = None,
) -> tuple[GraphEncoder, GlobalProjection, dict]:
    """Contrastively align graph embeddings with mask latents (k negatives)."""
    if not triplets:
        raise PretrainError("empty dataset")
    if config.negatives < 1:
        raise PretrainError("need at least one negative")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    feature_dim = _class_count(triplets) + 4
    encoder = GraphEncoder(
        EncoderConfig(
            feature_dim=feature_dim,
            hidden_dim=config.hidden_dim,
            embed_dim=config.embed_dim,
            layers=config.gnn_layers,
        )
    )
    latents = precompute_mask_latents(triplets, mask_codec)
    serialized = [serialize_graph(t.graph) for t in triplets]
    projection = GlobalProjection(
        mask_latent_dim=latents.shape[1],
        embed_dim=config.embed_dim,
        normalize=config.normalize,
    )

    val_pack = None
    if val_triplets:
        val_latents = precompute_mask_latents(val_triplets, mask_codec)
        val_serialized = [serialize_graph(t.graph) for t in val_triplets]
        val_pack = (val_triplets, val_latents, val_serialized)

    params = list(encoder.parameters()) + list(projection.parameters())
    optimizer = torch.optim.Adam(params, lr=config.lr)
    history = {"train_loss": [], "val_retrieval": []}

    def eval_retrieval(epoch):
        if val_pack is None:
            return None
        vt, vl, vs = val_pack
        return retrieval_accuracy(
            encoder, projection, vt, vl, vs, config.negatives,
            np.random.default_rng(config.seed + 7 + epoch),
        )

    start = eval_retrieval(-1)
    if start is not None:
        history["val_retrieval"].append(start)

    k = config.negatives
    for epoch in range(config.epochs):
        encoder.train(), projection.train()
        order = rng.permutation(len(triplets))
        losses = []
        for begin in range(0, len(order), config.batch_size):
            rows = order[begin : begin + config.batch_size]
            batches = [
                draw_contrastive_sample(int(i), triplets, latents, serialized, k, rng)
                for i in rows
            ]
            z_g = projection.graph_side(
                encoder.encode_graphs([b.graph for b in batches])
            )
            candidates = torch.stack(
                [
                    torch.stack([b.positive_mask_latent] + b.negative_mask_latents)
                    for b in batches
                ]
            )  # (B, 1+k, flat)
            z_m = projection.mask_side(candidates)
            logits = torch.einsum("be,bke->bk", z_g, z_m)
            loss = F.cross_entropy(logits, torch.zeros(len(batches), dtype=torch.long))
            if not torch.isfinite(loss):
                raise PretrainDivergenceError(f"non-finite global loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        history["train_loss"].append(float(np.mean(losses)))
        val = eval_retrieval(epoch)
        if val is not None:
            history["val_retrieval"].append(val)

    encoder.eval(), projection.eval()
    return encoder, projection, history


def group_distance_ratio(embeddings: np.ndarray, groups: list) -> float:
    """Mean pairwise L2 distance within groups over mean across groups."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    n = len(embeddings)
    if n < 2:
        raise PretrainError("need at least two embeddings")
    diffs = embeddings[:, None, :] - embeddings[None, :, :]
    dist = np.sqrt((diffs**2).sum(-1))
    same = np.array([[groups[i] == groups[j] for j in range(n)] for i in range(n)])
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    within = dist[same & upper]
    across = dist[~same & upper]
    if len(within) == 0 or len(across) == 0:
        raise PretrainError("need both within-group and across-group pairs")
    return float(within.mean() / across.mean())
