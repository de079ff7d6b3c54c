"""Dataset ingestion and the procedural toy-scene generator.

Toy scenes mimic the structure of surgical frames at desk scale: a dark
void (class 0), a textured circular "anatomy" region (class 1) whose color
and texture are shared by all frames of the same synthetic video, and a few
flat-colored tool shapes (classes 2..d-1). Masks are exact by construction,
so every (image, mask, graph) triplet is consistent.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import sg_core
from .sg_core import SceneGraph, SegmentationMask, extract_scene_graph


class DataError(ValueError):
    """Dataset layout, split spec or file content problem."""


# fixed tool palette; classes 2.. cycle through these (color, shape) pairs
_TOOL_STYLES = [
    ((0.88, 0.18, 0.18), "rect"),
    ((0.15, 0.75, 0.25), "disc"),
    ((0.20, 0.45, 0.95), "triangle"),
    ((0.95, 0.85, 0.20), "cross"),
    ((0.80, 0.25, 0.85), "rect"),
    ((0.15, 0.85, 0.85), "disc"),
    ((0.95, 0.55, 0.15), "triangle"),
    ((0.55, 0.35, 0.15), "cross"),
]


def tool_style(class_id: int):
    """(rgb color, shape kind) for a tool class (class ids start at 2)."""
    return _TOOL_STYLES[(class_id - 2) % len(_TOOL_STYLES)]


@dataclass(frozen=True)
class ToyConfig:
    image_size: int = 64
    class_count: int = 6                       # 0 void, 1 anatomy, 2.. tools
    shapes_per_scene: tuple[int, int] = (0, 3)
    videos_per_split: dict = field(
        default_factory=lambda: {"train": 8, "val": 2, "test": 2}
    )
    frames_per_video: int = 32
    seed: int = 0
    excluded_classes: tuple[int, ...] = (0,)   # graph extraction settings
    min_component_size: int = 4

    def __post_init__(self):
        if self.class_count < 2:
            raise DataError("class_count must be >= 2 (void + at least one class)")
        lo, hi = self.shapes_per_scene
        if not (0 <= lo <= hi <= self.class_count - 2):
            raise DataError(
                f"shapes_per_scene {self.shapes_per_scene} incompatible with "
                f"{self.class_count - 2} tool classes"
            )

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["shapes_per_scene"] = list(self.shapes_per_scene)
        out["excluded_classes"] = list(self.excluded_classes)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ToyConfig":
        kwargs = dict(data)
        if "shapes_per_scene" in kwargs:
            kwargs["shapes_per_scene"] = tuple(kwargs["shapes_per_scene"])
        if "excluded_classes" in kwargs:
            kwargs["excluded_classes"] = tuple(kwargs["excluded_classes"])
        return cls(**kwargs)


@dataclass
class Triplet:
    image: np.ndarray            # (H, W, 3) float32 in [0, 1], training resolution
    mask: SegmentationMask       # training resolution
    graph: SceneGraph            # extracted at original resolution
    video_id: str
    frame_id: str


# --------------------------------------------------------------------------
# PNG I/O
# --------------------------------------------------------------------------

def write_image_png(path, image: np.ndarray):
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="RGB").save(path)


def read_image_png(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def write_mask_png(path, labels: np.ndarray):
    labels = np.asarray(labels)
    if labels.max(initial=0) > 255:
        raise DataError("mask PNG supports at most 256 classes")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path)


def read_mask_png(path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode not in ("L", "P", "I", "I;16"):
            img = img.convert("L")
        return np.asarray(img, dtype=np.int64)


def resize_image(image: np.ndarray, size: int) -> np.ndarray:
    pil = Image.fromarray((np.clip(image, 0, 1) * 255.0 + 0.5).astype(np.uint8), mode="RGB")
    pil = pil.resize((size, size), Image.BILINEAR)
    return np.asarray(pil, dtype=np.float32) / 255.0


def resize_mask(labels: np.ndarray, size: int) -> np.ndarray:
    # nearest neighbour only: any interpolation would invent labels
    pil = Image.fromarray(labels.astype(np.uint8), mode="L")
    pil = pil.resize((size, size), Image.NEAREST)
    return np.asarray(pil, dtype=np.int64)


# --------------------------------------------------------------------------
# toy scene synthesis
# --------------------------------------------------------------------------

def video_params(config: ToyConfig, video_index: int) -> dict:
    """Per-video appearance: base color and texture of the anatomy disc."""
    rng = np.random.default_rng([config.seed, 1000 + video_index])
    base = rng.uniform(0.25, 0.62, size=3)
    # push one channel up so videos get clearly distinct hues
    base[rng.integers(0, 3)] = rng.uniform(0.55, 0.72)
    return {
        "base_color": base,
        "freq": rng.uniform(0.4, 1.2, size=2),
        "phase": rng.uniform(0.0, 2.0 * np.pi),
    }


def _shape_region(kind: str, xs, ys, cx, cy, half_w, half_h):
    if kind == "rect":
        return (np.abs(xs - cx) <= half_w) & (np.abs(ys - cy) <= half_h)
    if kind == "disc":
        return ((xs - cx) / half_w) ** 2 + ((ys - cy) / half_h) ** 2 <= 1.0
    if kind == "triangle":
        top = cy - half_h
        inside_y = (ys >= top) & (ys <= cy + half_h)
        frac = np.clip((ys - top) / (2.0 * half_h), 0.0, 1.0)
        return inside_y & (np.abs(xs - cx) <= frac * half_w)
    if kind == "cross":
        bar = (np.abs(xs - cx) <= half_w) & (np.abs(ys - cy) <= 0.55 * half_h)
        post = (np.abs(xs - cx) <= 0.55 * half_w) & (np.abs(ys - cy) <= half_h)
        return bar | post
    raise DataError(f"unknown shape kind '{kind}'")


def render_toy_scene(config: ToyConfig, video: dict, rng: np.random.Generator):
    """One (image, labels) pair. Image float (S, S, 3) in [0, 1], labels int (S, S)."""
    size = config.image_size
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    xs_n, ys_n = xs / size, ys / size

    labels = np.zeros((size, size), dtype=np.int64)
    image = 0.10 + 0.012 * rng.random((size, size, 3))

    # anatomy disc, textured with the video's color and stripe pattern
    disc_cx = 0.5 + rng.uniform(-0.05, 0.05)
    disc_cy = 0.5 + rng.uniform(-0.05, 0.05)
    disc_r = rng.uniform(0.34, 0.45)
    disc = (xs_n - disc_cx) ** 2 + (ys_n - disc_cy) ** 2 <= disc_r**2
    phase = video["phase"] + rng.uniform(-0.4, 0.4)
    stripes = np.sin(
        2.0 * np.pi * (video["freq"][0] * xs_n + video["freq"][1] * ys_n) + phase
    )
    texture = video["base_color"][None, None, :] * (1.0 + 0.06 * stripes[:, :, None])
    image[disc] = np.clip(texture[disc] + 0.008 * rng.standard_normal((int(disc.sum()), 3)), 0, 1)
    labels[disc] = 1

    # tools: distinct classes, flat colors, placed inside the disc; positions
    # are rejection-sampled away from already-placed tools so shapes rarely
    # occlude each other (occlusion fragments make round-trip scoring noisy)
    n_tools = int(rng.integers(config.shapes_per_scene[0], config.shapes_per_scene[1] + 1))
    tool_classes = rng.choice(
        np.arange(2, config.class_count), size=n_tools, replace=False
    )
    placed: list[tuple[float, float, float]] = []
    for class_id in tool_classes:
        color, kind = tool_style(int(class_id))
        half_w = rng.uniform(0.08, 0.14)
        half_h = rng.uniform(0.08, 0.14)
        reach = float(np.hypot(half_w, half_h))
        best, best_clearance = None, -np.inf
        for _ in range(20):
            angle = rng.uniform(0.0, 2.0 * np.pi)
            rad = disc_r * 0.55 * np.sqrt(rng.uniform(0.0, 1.0))
            cx = disc_cx + rad * np.cos(angle)
            cy = disc_cy + rad * np.sin(angle)
            clearance = min(
                (np.hypot(cx - px, cy - py) - (reach + pr) for px, py, pr in placed),
                default=np.inf,
            )
            if clearance > best_clearance:
                best, best_clearance = (cx, cy), clearance
            if clearance >= 0.0:
                break
        cx, cy = best
        placed.append((cx, cy, reach))
        region = _shape_region(kind, xs_n, ys_n, cx, cy, half_w, half_h)
        if not region.any():
            continue
        image[region] = np.clip(
            np.asarray(color)[None, :] + 0.008 * rng.standard_normal((int(region.sum()), 3)), 0, 1
        )
        labels[region] = int(class_id)

    return image.astype(np.float32), labels


def generate_toy_dataset(config: ToyConfig, root) -> dict:
    """Materialize the toy dataset under `root` in the standard layout.

    Layout: {video_id}/{frame_id}.png + {frame_id}.mask.png + cached
    {frame_id}.graph.json, plus splits.json and meta.json at the root.
    Deterministic given config.seed.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)

    splits = {}
    video_index = 0
    counts = {}
    for split, n_videos in config.videos_per_split.items():
        ids = []
        for _ in range(n_videos):
            video_id = f"video_{video_index:03d}"
            ids.append(video_id)
            video_dir = root / video_id
            video_dir.mkdir(exist_ok=True)
            video = video_params(config, video_index)
            for frame_index in range(config.frames_per_video):
                rng = np.random.default_rng([config.seed, video_index, frame_index])
                image, mask_labels = render_toy_scene(config, video, rng)
                frame_id = f"frame_{frame_index:04d}"
                write_image_png(video_dir / f"{frame_id}.png", image)
                write_mask_png(video_dir / f"{frame_id}.mask.png", mask_labels)
                graph = extract_scene_graph(
                    SegmentationMask(mask_labels, config.class_count),
                    excluded_classes=config.excluded_classes,
                    min_component_size=config.min_component_size,
                )
                (video_dir / f"{frame_id}.graph.json").write_text(
                    sg_core.serialize_graph(graph)
                )
            video_index += 1
        splits[split] = ids
        counts[split] = n_videos * config.frames_per_video

    (root / "splits.json").write_text(json.dumps(splits, indent=2))
    (root / "meta.json").write_text(json.dumps(config.to_dict(), indent=2))
    return {"videos": video_index, "triplets": counts}


# --------------------------------------------------------------------------
# loading
# --------------------------------------------------------------------------

def load_meta(root) -> dict:
    meta_path = Path(root) / "meta.json"
    if not meta_path.exists():
        raise DataError(f"missing meta.json under {root}")
    return json.loads(meta_path.read_text())


def load_dataset(
    root,
    split_spec=None,
    image_size: int | None = None,
    verify_cache: bool = False,
) -> dict[str, list[Triplet]]:
    """Load (image, mask, graph) triplets per split.

    `split_spec` is a mapping of split name to video-id list, or None to read
    root/splits.json. Images are resized bilinearly and masks with nearest
    neighbour when `image_size` differs from the stored resolution; graphs
    always come from the original-resolution mask (coordinates are
    normalized, so no graph rescaling is needed).
    """
    root = Path(root)
    meta = load_meta(root)
    class_count = int(meta["class_count"])
    excluded = set(meta.get("excluded_classes", []))
    min_size = int(meta.get("min_component_size", sg_core.DEFAULT_MIN_COMPONENT_SIZE))

    if split_spec is None:
        splits_path = root / "splits.json"
        if not splits_path.exists():
            raise DataError(f"missing splits.json under {root}")
        split_spec = json.loads(splits_path.read_text())

    seen: dict[str, str] = {}
    for split, videos in split_spec.items():
        for video_id in videos:
            if video_id in seen:
                raise DataError(
                    f"video '{video_id}' appears in both '{seen[video_id]}' and '{split}'"
                )
            seen[video_id] = split

    out: dict[str, list[Triplet]] = {}
    for split, videos in split_spec.items():
        triplets = []
        for video_id in videos:
            video_dir = root / video_id
            if not video_dir.is_dir():
                raise DataError(f"missing video directory {video_dir}")
            for image_path in sorted(video_dir.glob("*.png")):
                if image_path.name.endswith(".mask.png"):
                    continue
                frame_id = image_path.name[: -len(".png")]
                mask_path = video_dir / f"{frame_id}.mask.png"
                if not mask_path.exists():
                    raise DataError(f"missing mask for {image_path}")
                image = read_image_png(image_path)
                labels = read_mask_png(mask_path)
                try:
                    mask = SegmentationMask(labels, class_count)
                except sg_core.GraphValidationError as exc:
                    raise DataError(f"{mask_path}: {exc}") from exc

                graph_path = video_dir / f"{frame_id}.graph.json"
                if graph_path.exists():
                    graph = sg_core.deserialize_graph(graph_path.read_text())
                    if verify_cache:
                        fresh = extract_scene_graph(mask, excluded, min_size)
                        if fresh != graph:
                            raise DataError(f"stale graph cache at {graph_path}")
                else:
                    graph = extract_scene_graph(mask, excluded, min_size)

                if image_size is not None and image_size != labels.shape[0]:
                    image = resize_image(image, image_size)
                    mask = SegmentationMask(resize_mask(labels, image_size), class_count)
                triplets.append(
                    Triplet(image=image, mask=mask, graph=graph, video_id=video_id, frame_id=frame_id)
                )
        out[split] = triplets
    return out


def mask_to_onehot(mask: SegmentationMask) -> np.ndarray:
    """(H, W) labels to float32 one-hot (H, W, d)."""
    onehot = np.zeros((*mask.labels.shape, mask.class_count), dtype=np.float32)
    rows, cols = np.indices(mask.labels.shape)
    onehot[rows, cols, mask.labels] = 1.0
    return onehot
