"""Stacked GNN encoder mapping scene graphs to fixed-width embeddings.

Each layer updates a node from the concatenation of its own state and the
mean over its neighbours' states (isolated nodes aggregate zero), final node
states are mean-pooled per graph and projected to the embedding width. Two
independently parameterized instances serve as the local and global
encoders.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .sg_core import SceneGraph


class GraphBatchError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    feature_dim: int          # d + 4
    hidden_dim: int = 128
    embed_dim: int = 256
    layers: int = 3

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class GraphBatch:
    node_features: torch.Tensor   # (total_nodes, feature_dim)
    edge_index: torch.Tensor      # (n_edges, 2) undirected pairs, local indices
    graph_ids: torch.Tensor       # (total_nodes,) membership, contiguous and sorted
    batch_size: int

    def __post_init__(self):
        if self.node_features.ndim != 2:
            raise GraphBatchError("node_features must be 2-D")
        if len(self.graph_ids) != len(self.node_features):
            raise GraphBatchError("graph_ids must align with node_features")
        ids = self.graph_ids
        if len(ids) and (ids[:-1] > ids[1:]).any():
            raise GraphBatchError("graph_ids must be sorted")
        if len(ids) and int(ids.max()) >= self.batch_size:
            raise GraphBatchError("graph_ids exceed batch_size")

    @classmethod
    def from_graphs(cls, graphs: list[SceneGraph], feature_dim: int) -> "GraphBatch":
        features, edges, ids = [], [], []
        offset = 0
        for graph_idx, graph in enumerate(graphs):
            for node in graph.nodes:
                vec = node.feature_vector()
                if len(vec) != feature_dim:
                    raise GraphBatchError(
                        f"node feature width {len(vec)} != expected {feature_dim}"
                    )
                features.append(vec)
                ids.append(graph_idx)
            for a, b in graph.sorted_edges():
                edges.append((a + offset, b + offset))
            offset += graph.node_count
        node_features = (
            torch.from_numpy(np.stack(features)) if features else torch.zeros(0, feature_dim)
        )
        edge_index = (
            torch.tensor(edges, dtype=torch.long) if edges else torch.zeros(0, 2, dtype=torch.long)
        )
        return cls(
            node_features=node_features.float(),
            edge_index=edge_index,
            graph_ids=torch.tensor(ids, dtype=torch.long),
            batch_size=len(graphs),
        )


def mean_aggregate(features: torch.Tensor, edge_index: torch.Tensor) -> torch.Tensor:
    """Mean over neighbour states per node; zero vector for isolated nodes."""
    agg = torch.zeros_like(features)
    if len(edge_index):
        src = torch.cat([edge_index[:, 0], edge_index[:, 1]])
        dst = torch.cat([edge_index[:, 1], edge_index[:, 0]])
        agg.index_add_(0, dst, features[src])
        degree = torch.zeros(len(features), dtype=features.dtype, device=features.device)
        degree.index_add_(0, dst, torch.ones_like(dst, dtype=features.dtype))
        agg = agg / degree.clamp(min=1.0).unsqueeze(1)
    return agg


class GNNLayer(nn.Module):
    """h_v' = MLP([h_v ; mean_{u in N(v)} h_u])."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(2 * in_dim, out_dim)
        self.fc2 = nn.Linear(out_dim, out_dim)

    def forward(self, features: torch.Tensor, edge_index: torch.Tensor) -> torch.Tensor:
        agg = mean_aggregate(features, edge_index)
        h = torch.cat([features, agg], dim=1)
        return self.fc2(F.silu(self.fc1(h)))


class GraphEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        dims = [config.feature_dim] + [config.hidden_dim] * config.layers
        self.layers = nn.ModuleList(
            GNNLayer(dims[i], dims[i + 1]) for i in range(config.layers)
        )
        self.head = nn.Linear(config.hidden_dim, config.embed_dim)
        self.null_embedding = nn.Parameter(torch.zeros(config.embed_dim))

    def node_states(self, batch: GraphBatch) -> torch.Tensor:
        h = batch.node_features
        for layer in self.layers:
            h = F.silu(layer(h, batch.edge_index))
        return h

    def forward(self, batch: GraphBatch) -> torch.Tensor:
        """(batch_size, embed_dim); empty graphs map to the learned null row."""
        h = self.node_states(batch)
        pooled = torch.zeros(
            batch.batch_size, h.shape[1], dtype=h.dtype, device=h.device
        )
        counts = torch.zeros(batch.batch_size, dtype=h.dtype, device=h.device)
        if len(h):
            pooled.index_add_(0, batch.graph_ids, h)
            counts.index_add_(
                0, batch.graph_ids, torch.ones_like(batch.graph_ids, dtype=h.dtype)
            )
        embeddings = self.head(pooled / counts.clamp(min=1.0).unsqueeze(1))
        empty = counts == 0
        if empty.any():
            embeddings = torch.where(
                empty.unsqueeze(1), self.null_embedding.to(h.dtype).unsqueeze(0), embeddings
            )
        return embeddings

    def encode_graphs(self, graphs: list[SceneGraph]) -> torch.Tensor:
        return self(GraphBatch.from_graphs(graphs, self.config.feature_dim))

    def encode_graph(self, graph: SceneGraph) -> torch.Tensor:
        """Unbatched convenience entry; routed through the batch path."""
        return self.encode_graphs([graph])[0]


def save_graph_encoder(path, model: GraphEncoder, extra: dict | None = None):
    save_checkpoint(
        path, kind="graph_encoder", config=model.config.to_dict(),
        state=model.state_dict(), extra=extra,
    )


def load_graph_encoder(path) -> GraphEncoder:
    payload = load_checkpoint(path, expected_kind="graph_encoder")
    model = GraphEncoder(EncoderConfig(**payload["config"]))
    model.load_state_dict(payload["state"])
    model.eval()
    return model
