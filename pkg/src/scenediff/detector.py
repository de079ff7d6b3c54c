"""Small segmentation-based detector for round-trip scoring on toy data.

A per-pixel classifier is trained on (image, mask) pairs with light noise
and blur augmentation so it stays reliable on generated images; detection
runs connected components over the predicted label grid and emits one box
per component with the mean class probability as its score.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .evaluation import DetectionResult
from .sg_core import SegmentationMask, connected_components


class DetectorError(ValueError):
    pass


class SegmentationDetector(nn.Module):
    def __init__(
        self,
        class_count: int,
        base_channels: int = 24,
        excluded_classes: tuple[int, ...] = (0,),
        min_component_size: int = 12,
        min_score: float = 0.85,
    ):
        super().__init__()
        self.class_count = class_count
        self.base_channels = base_channels
        self.excluded_classes = tuple(excluded_classes)
        self.min_component_size = min_component_size
        self.min_score = min_score
        c = base_channels
        self.enc1 = nn.Sequential(
            nn.Conv2d(3, c, 3, padding=1), nn.SiLU(), nn.Conv2d(c, c, 3, padding=1), nn.SiLU()
        )
        self.down = nn.Conv2d(c, 2 * c, 4, stride=2, padding=1)
        self.enc2 = nn.Sequential(
            nn.Conv2d(2 * c, 2 * c, 3, padding=1), nn.SiLU(),
            nn.Conv2d(2 * c, 2 * c, 3, padding=1), nn.SiLU(),
        )
        self.up = nn.ConvTranspose2d(2 * c, c, 4, stride=2, padding=1)
        self.head = nn.Sequential(
            nn.Conv2d(2 * c, c, 3, padding=1), nn.SiLU(), nn.Conv2d(c, class_count, 1)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h1 = self.enc1(x)
        h2 = self.enc2(self.down(h1))
        return self.head(torch.cat([self.up(h2), h1], dim=1))

    @torch.no_grad()
    def predict_probabilities(self, image: np.ndarray) -> np.ndarray:
        self.eval()
        x = torch.from_numpy(np.ascontiguousarray(image, np.float32)).permute(2, 0, 1)
        logits = self(x.unsqueeze(0))[0]
        return torch.softmax(logits, dim=0).permute(1, 2, 0).numpy()

    def detect(self, image: np.ndarray) -> DetectionResult:
        """Boxes from connected components of the predicted label grid.

        Components below the detector's size floor (boundary slivers) or
        score floor are dropped.
        """
        probs = self.predict_probabilities(image)
        labels = probs.argmax(-1).astype(np.int64)
        mask = SegmentationMask(labels, self.class_count)
        boxes = []
        for comp in connected_components(mask, self.excluded_classes):
            if comp.pixel_count < self.min_component_size:
                continue
            rows, cols = comp.pixels[:, 0], comp.pixels[:, 1]
            score = float(probs[rows, cols, comp.class_id].mean())
            if score < self.min_score:
                continue
            min_row, min_col, max_row, max_col = comp.bbox
            boxes.append(
                (comp.class_id, int(min_col), int(min_row), int(max_col) + 1, int(max_row) + 1, score)
            )
        return DetectionResult(boxes=boxes, image_size=labels.shape)


class OracleDetector:
    """Perfect detector reading boxes straight from ground-truth masks."""

    def __init__(self, masks_by_key: dict, excluded_classes=(0,), min_component_size: int = 4):
        self.masks_by_key = masks_by_key
        self.excluded_classes = excluded_classes
        self.min_component_size = min_component_size

    def detect(self, image: np.ndarray) -> DetectionResult:
        key = image.tobytes()
        if key not in self.masks_by_key:
            raise DetectorError("oracle detector has no mask for this image")
        mask = self.masks_by_key[key]
        boxes = []
        for comp in connected_components(mask, self.excluded_classes):
            if comp.pixel_count < self.min_component_size:
                continue
            min_row, min_col, max_row, max_col = comp.bbox
            boxes.append(
                (comp.class_id, int(min_col), int(min_row), int(max_col) + 1, int(max_row) + 1, 1.0)
            )
        return DetectionResult(boxes=boxes, image_size=mask.labels.shape)


class DetectorDivergenceError(RuntimeError):
    pass


def train_detector(
    images: np.ndarray,
    labels: np.ndarray,
    class_count: int,
    epochs: int = 8,
    batch_size: int = 16,
    lr: float = 2e-3,
    seed: int = 0,
    base_channels: int = 24,
    noise_std: float = 0.03,
    min_component_size: int = 12,
    min_score: float = 0.85,
) -> tuple[SegmentationDetector, dict]:
    """Train on (N, H, W, 3) images and (N, H, W) integer labels.

    Inputs are augmented with Gaussian noise and occasional blur so the
    detector tolerates generated images.
    """
    if len(images) == 0:
        raise DetectorError("empty dataset")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = SegmentationDetector(class_count, base_channels, min_component_size=min_component_size, min_score=min_score)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    noise_gen = torch.Generator().manual_seed(seed)
    history = {"train_loss": []}

    freq = np.bincount(labels.flatten(), minlength=class_count) / labels.size
    weights = 1.0 / (freq + 1e-3)
    weight_t = torch.from_numpy(weights / weights.sum() * class_count).float()

    for epoch in range(epochs):
        model.train()
        order = rng.permutation(len(images))
        losses = []
        for begin in range(0, len(order), batch_size):
            rows = order[begin : begin + batch_size]
            x = torch.from_numpy(images[rows]).permute(0, 3, 1, 2).float()
            y = torch.from_numpy(labels[rows]).long()
            x = x + noise_std * torch.randn(x.shape, generator=noise_gen)
            if rng.random() < 0.3:
                x = F.avg_pool2d(x, 3, stride=1, padding=1)
            loss = F.cross_entropy(model(x), y, weight=weight_t)
            if not torch.isfinite(loss):
                raise DetectorDivergenceError(f"non-finite detector loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        history["train_loss"].append(float(np.mean(losses)))
    model.eval()
    return model, history


def save_detector(path, model: SegmentationDetector):
    save_checkpoint(
        path, kind="detector",
        config={
            "class_count": model.class_count,
            "base_channels": model.base_channels,
            "excluded_classes": list(model.excluded_classes),
            "min_component_size": model.min_component_size,
            "min_score": model.min_score,
        },
        state=model.state_dict(),
    )


def load_detector(path) -> SegmentationDetector:
    payload = load_checkpoint(path, expected_kind="detector")
    config = dict(payload["config"])
    config["excluded_classes"] = tuple(config.get("excluded_classes", (0,)))
    model = SegmentationDetector(**config)
    model.load_state_dict(payload["state"])
    model.eval()
    return model
