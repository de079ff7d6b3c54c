"""Scene graphs from segmentation masks.

A scene is represented as one node per connected component of the mask,
carrying a class one-hot, a normalized bounding-box spread and a normalized
centroid, with undirected edges between components that touch spatially.
Centroids and spreads are normalized by the mask size, so graphs are
resolution independent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

GRAPH_SCHEMA_VERSION = 1

# 4-connectivity for component labeling, 8-neighbourhood for touching:
# diagonal same-class blobs stay separate nodes but still register an edge.
_STRUCTURE_4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
_OFFSETS_8 = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]

DEFAULT_MIN_COMPONENT_SIZE = 4


class GraphValidationError(ValueError):
    """A graph, node or mask violates a structural invariant."""


class GraphParseError(ValueError):
    """Serialized graph text is malformed or out of range."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


@dataclass(frozen=True)
class SegmentationMask:
    """Integer label grid of shape (H, W) with values in [0, class_count)."""

    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2 or labels.shape[0] < 1 or labels.shape[1] < 1:
            raise GraphValidationError(f"mask must be a non-empty 2-D grid, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise GraphValidationError(f"mask labels must be integers, got dtype {labels.dtype}")
        if self.class_count < 1:
            raise GraphValidationError("class_count must be >= 1")
        if labels.min() < 0 or labels.max() >= self.class_count:
            raise GraphValidationError(
                f"mask values must lie in [0, {self.class_count}), got range "
                f"[{labels.min()}, {labels.max()}]"
            )
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> tuple[int, int]:
        return self.labels.shape  # (H, W)


@dataclass(frozen=True)
class Component:
    """A maximal 4-connected set of same-class pixels."""

    class_id: int
    pixels: np.ndarray  # (N, 2) int rows of (row, col), lexicographically sorted

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.int64).reshape(-1, 2)
        order = np.lexsort((pixels[:, 1], pixels[:, 0]))
        object.__setattr__(self, "pixels", pixels[order])

    @property
    def pixel_count(self) -> int:
        return len(self.pixels)

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        """(min_row, min_col, max_row, max_col), inclusive."""
        rows, cols = self.pixels[:, 0], self.pixels[:, 1]
        return int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max())


@dataclass(frozen=True)
class SGNode:
    """One scene-graph node: class one-hot plus normalized spread and centroid.

    The feature vector is laid out as [class one-hot (d), spread (2),
    centroid (2)], giving d + 4 entries.
    """

    class_id: int
    class_count: int
    spread: tuple[float, float]    # (width / W, height / H)
    centroid: tuple[float, float]  # (x / W, y / H)
    component_id: int = -1         # extraction index; -1 for synthetic nodes

    def __post_init__(self):
        if not 0 <= self.class_id < self.class_count:
            raise GraphValidationError(
                f"class_id {self.class_id} out of range [0, {self.class_count})"
            )
        spread = (float(self.spread[0]), float(self.spread[1]))
        centroid = (float(self.centroid[0]), float(self.centroid[1]))
        for name, pair in (("spread", spread), ("centroid", centroid)):
            if len(pair) != 2 or not all(np.isfinite(v) and 0.0 <= v <= 1.0 for v in pair):
                raise GraphValidationError(f"{name} components must lie in [0, 1], got {pair}")
        object.__setattr__(self, "spread", spread)
        object.__setattr__(self, "centroid", centroid)

    @property
    def class_onehot(self) -> np.ndarray:
        onehot = np.zeros(self.class_count, dtype=np.float32)
        onehot[self.class_id] = 1.0
        return onehot

    def feature_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.class_onehot, np.asarray(self.spread, np.float32), np.asarray(self.centroid, np.float32)]
        )


@dataclass(frozen=True)
class SceneGraph:
    nodes: tuple[SGNode, ...]
    edges: frozenset[tuple[int, int]]  # canonical (i, j) with i < j
    source_size: tuple[int, int]       # (H, W)

    def __post_init__(self):
        nodes = tuple(self.nodes)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "source_size", (int(self.source_size[0]), int(self.source_size[1])))
        if self.source_size[0] < 1 or self.source_size[1] < 1:
            raise GraphValidationError(f"source_size must be positive, got {self.source_size}")
        counts = {node.class_count for node in nodes}
        if len(counts) > 1:
            raise GraphValidationError(f"nodes disagree on class_count: {sorted(counts)}")
        edges = frozenset((int(a), int(b)) for a, b in self.edges)
        for a, b in edges:
            if a == b:
                raise GraphValidationError(f"self-loop on node {a}")
            if not (0 <= a < len(nodes) and 0 <= b < len(nodes)):
                raise GraphValidationError(f"edge ({a}, {b}) references invalid node index")
            if a > b:
                raise GraphValidationError(f"edge ({a}, {b}) is not in canonical order")
        object.__setattr__(self, "edges", edges)

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    @property
    def class_count(self) -> int | None:
        """Class count shared by all nodes, or None for an empty graph."""
        return self.nodes[0].class_count if self.nodes else None

    def sorted_edges(self) -> list[tuple[int, int]]:
        return sorted(self.edges)


def connected_components(
    mask: SegmentationMask, excluded_classes: Iterable[int] = ()
) -> list[Component]:
    """All maximal 4-connected same-class components, excluded classes dropped.

    Components of every retained class are returned regardless of size, so
    per-class pixel counts partition the retained area of the mask.
    """
    excluded = set(excluded_classes)
    components = []
    for class_id in np.unique(mask.labels):
        class_id = int(class_id)
        if class_id in excluded:
            continue
        labeled, count = ndimage.label(mask.labels == class_id, structure=_STRUCTURE_4)
        for comp_label in range(1, count + 1):
            rows, cols = np.nonzero(labeled == comp_label)
            components.append(Component(class_id=class_id, pixels=np.stack([rows, cols], axis=1)))
    return components


def components_touching(a: Component, b: Component) -> bool:
    """True iff some pixel of `a` lies in the 8-neighbourhood of a pixel of `b`."""
    ar0, ac0, ar1, ac1 = a.bbox
    br0, bc0, br1, bc1 = b.bbox
    # bounding boxes further than one pixel apart cannot touch
    if ar0 > br1 + 1 or br0 > ar1 + 1 or ac0 > bc1 + 1 or bc0 > ac1 + 1:
        return False
    b_set = {(int(r), int(c)) for r, c in b.pixels}
    for r, c in a.pixels:
        for dr, dc in _OFFSETS_8 + [(0, 0)]:
            if (int(r) + dr, int(c) + dc) in b_set:
                return True
    return False


def _component_sort_key(comp: Component):
    min_row, min_col, _, _ = comp.bbox
    first = comp.pixels[0]
    return (comp.class_id, min_row, min_col, int(first[0]), int(first[1]))


def extract_scene_graph(
    mask: SegmentationMask,
    excluded_classes: Iterable[int] = (),
    min_component_size: int = DEFAULT_MIN_COMPONENT_SIZE,
) -> SceneGraph:
    """Build the scene graph of a mask.

    One node per retained component (excluded classes and components smaller
    than `min_component_size` pixels are dropped), ordered by (class_id,
    bbox top-left corner, first pixel). Edges connect components whose pixels
    touch in the 8-neighbourhood sense.
    """
    height, width = mask.size
    comps = [
        c
        for c in connected_components(mask, excluded_classes)
        if c.pixel_count >= min_component_size
    ]
    comps.sort(key=_component_sort_key)

    nodes = []
    for comp in comps:
        min_row, min_col, max_row, max_col = comp.bbox
        centroid = (
            float(comp.pixels[:, 1].mean() / width),
            float(comp.pixels[:, 0].mean() / height),
        )
        spread = ((max_col - min_col + 1) / width, (max_row - min_row + 1) / height)
        nodes.append(
            SGNode(
                class_id=comp.class_id,
                class_count=mask.class_count,
                spread=spread,
                centroid=centroid,
                component_id=len(nodes),
            )
        )

    # single scan over the label grid of retained components
    comp_grid = np.full(mask.size, -1, dtype=np.int64)
    for idx, comp in enumerate(comps):
        comp_grid[comp.pixels[:, 0], comp.pixels[:, 1]] = idx
    edges = set()
    for dr, dc in _OFFSETS_8:
        src = comp_grid[
            max(0, -dr) : height - max(0, dr), max(0, -dc) : width - max(0, dc)
        ]
        dst = comp_grid[
            max(0, dr) : height - max(0, -dr), max(0, dc) : width - max(0, -dc)
        ]
        contact = (src >= 0) & (dst >= 0) & (src != dst)
        for a, b in zip(src[contact].ravel(), dst[contact].ravel()):
            edges.add((min(int(a), int(b)), max(int(a), int(b))))

    return SceneGraph(nodes=tuple(nodes), edges=frozenset(edges), source_size=(height, width))


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

def serialize_graph(graph: SceneGraph) -> str:
    """Canonical JSON text: fixed key order, compact separators, sorted edges."""
    payload = {
        "version": GRAPH_SCHEMA_VERSION,
        "size": [graph.source_size[0], graph.source_size[1]],
        "nodes": [
            {
                "class_id": node.class_id,
                "class_count": node.class_count,
                "spread": [node.spread[0], node.spread[1]],
                "centroid": [node.centroid[0], node.centroid[1]],
                "component_id": node.component_id,
            }
            for node in graph.nodes
        ],
        "edges": [[a, b] for a, b in graph.sorted_edges()],
    }
    return json.dumps(payload, separators=(",", ":"))


def _require(data: dict, key: str, kind, field: str):
    if key not in data:
        raise GraphParseError(f"missing key '{key}'", field=field)
    value = data[key]
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise GraphParseError(f"'{key}' must be a number, got {type(value).__name__}", field=field)
        return float(value)
    if not isinstance(value, kind) or isinstance(value, bool):
        raise GraphParseError(f"'{key}' must be {kind.__name__}, got {type(value).__name__}", field=field)
    return value


def _parse_pair(data: dict, key: str, field: str) -> tuple[float, float]:
    raw = _require(data, key, list, field)
    if len(raw) != 2:
        raise GraphParseError(f"'{key}' must have exactly 2 entries", field=field)
    out = []
    for v in raw:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise GraphParseError(f"'{key}' entries must be numbers", field=field)
        out.append(float(v))
    return out[0], out[1]


def deserialize_graph(text: str) -> SceneGraph:
    """Parse canonical graph JSON, raising GraphParseError on any violation."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphParseError(f"malformed JSON: {exc}", field=None) from exc
    if not isinstance(data, dict):
        raise GraphParseError("graph document must be a JSON object", field=None)

    version = _require(data, "version", int, "version")
    if version != GRAPH_SCHEMA_VERSION:
        raise GraphParseError(
            f"unsupported schema version {version}, expected {GRAPH_SCHEMA_VERSION}",
            field="version",
        )
    size = _require(data, "size", list, "size")
    if len(size) != 2 or not all(isinstance(v, int) and not isinstance(v, bool) for v in size):
        raise GraphParseError("'size' must be [H, W] integers", field="size")
    if size[0] < 1 or size[1] < 1:
        raise GraphParseError(f"'size' must be positive, got {size}", field="size")

    raw_nodes = _require(data, "nodes", list, "nodes")
    nodes = []
    for i, raw in enumerate(raw_nodes):
        field = f"nodes[{i}]"
        if not isinstance(raw, dict):
            raise GraphParseError("node must be an object", field=field)
        class_id = _require(raw, "class_id", int, field)
        class_count = _require(raw, "class_count", int, field)
        spread = _parse_pair(raw, "spread", field)
        centroid = _parse_pair(raw, "centroid", field)
        component_id = _require(raw, "component_id", int, field)
        try:
            nodes.append(
                SGNode(
                    class_id=class_id,
                    class_count=class_count,
                    spread=spread,
                    centroid=centroid,
                    component_id=component_id,
                )
            )
        except GraphValidationError as exc:
            raise GraphParseError(str(exc), field=field) from exc

    raw_edges = _require(data, "edges", list, "edges")
    edges = set()
    for i, raw in enumerate(raw_edges):
        field = f"edges[{i}]"
        if (
            not isinstance(raw, list)
            or len(raw) != 2
            or not all(isinstance(v, int) and not isinstance(v, bool) for v in raw)
        ):
            raise GraphParseError("edge must be a pair of node indices", field=field)
        a, b = raw
        if a == b:
            raise GraphParseError(f"self-loop on node {a}", field=field)
        if not (0 <= a < len(nodes) and 0 <= b < len(nodes)):
            raise GraphParseError(f"edge ({a}, {b}) references invalid node index", field=field)
        pair = (min(a, b), max(a, b))
        if pair in edges:
            raise GraphParseError(f"duplicate edge ({a}, {b})", field=field)
        edges.add(pair)

    try:
        return SceneGraph(nodes=tuple(nodes), edges=frozenset(edges), source_size=(size[0], size[1]))
    except GraphValidationError as exc:
        raise GraphParseError(str(exc), field=None) from exc


# --------------------------------------------------------------------------
# edit operations (pure: each returns a new graph)
# --------------------------------------------------------------------------

def _check_index(graph: SceneGraph, idx: int):
    if not isinstance(idx, (int, np.integer)) or not 0 <= idx < graph.node_count:
        raise GraphValidationError(f"node index {idx} out of range [0, {graph.node_count})")


def move_node(graph: SceneGraph, idx: int, new_centroid: Sequence[float]) -> SceneGraph:
    _check_index(graph, idx)
    node = replace(graph.nodes[idx], centroid=(float(new_centroid[0]), float(new_centroid[1])))
    nodes = graph.nodes[:idx] + (node,) + graph.nodes[idx + 1 :]
    return replace(graph, nodes=nodes)


def change_class(graph: SceneGraph, idx: int, new_class: int) -> SceneGraph:
    _check_index(graph, idx)
    node = replace(graph.nodes[idx], class_id=int(new_class))
    nodes = graph.nodes[:idx] + (node,) + graph.nodes[idx + 1 :]
    return replace(graph, nodes=nodes)


def delete_node(graph: SceneGraph, idx: int) -> SceneGraph:
    """Remove a node, its incident edges, and reindex the remaining edges."""
    _check_index(graph, idx)
    nodes = graph.nodes[:idx] + graph.nodes[idx + 1 :]
    edges = set()
    for a, b in graph.edges:
        if a == idx or b == idx:
            continue
        a_new = a - 1 if a > idx else a
        b_new = b - 1 if b > idx else b
        edges.add((min(a_new, b_new), max(a_new, b_new)))
    return replace(graph, nodes=nodes, edges=frozenset(edges))


def add_node(graph: SceneGraph, node: SGNode, neighbors: Iterable[int] = ()) -> SceneGraph:
    """Append a node, connecting it to the given existing node indices."""
    new_idx = graph.node_count
    edges = set(graph.edges)
    for other in neighbors:
        if not 0 <= int(other) < new_idx:
            raise GraphValidationError(f"neighbor index {other} out of range [0, {new_idx})")
        edges.add((int(other), new_idx))
    return replace(graph, nodes=graph.nodes + (node,), edges=frozenset(edges))
