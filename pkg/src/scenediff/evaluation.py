"""Quantitative harness: distribution metrics and round-trip coherence.

FID and KID run on pluggable feature sets; at desk scale features come from
the trained image codec's encoder instead of a large pretrained network.
Round-trip coherence converts generated images back into labeled boxes with
a detector and scores them against the conditioning graphs (mean matched
IoU and F1, both at the 0.5 IoU threshold, per-class Hungarian matching).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .sg_core import SceneGraph


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSet:
    features: np.ndarray  # (N, f)
    extractor_id: str

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim != 2:
            raise EvaluationError("features must be (N, f)")
        if not np.isfinite(features).all():
            raise EvaluationError("features must be finite")
        object.__setattr__(self, "features", features)

    def __len__(self):
        return len(self.features)


@dataclass
class DetectionResult:
    """Class-labeled boxes in pixel coordinates, half-open (x0, y0, x1, y1)."""

    boxes: list = field(default_factory=list)  # (class_id, x0, y0, x1, y1, score)
    image_size: tuple[int, int] = (0, 0)       # (H, W)

    def __post_init__(self):
        height, width = self.image_size
        for class_id, x0, y0, x1, y1, score in self.boxes:
            if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
                raise EvaluationError(f"box ({x0},{y0},{x1},{y1}) outside image {self.image_size}")
            if not 0.0 <= score <= 1.0:
                raise EvaluationError(f"score {score} outside [0, 1]")


# --------------------------------------------------------------------------
# distribution metrics
# --------------------------------------------------------------------------

def _check_pair(real: FeatureSet, fake: FeatureSet, minimum: int):
    if real.extractor_id != fake.extractor_id:
        raise EvaluationError(
            f"extractor mismatch: '{real.extractor_id}' vs '{fake.extractor_id}'"
        )
    if len(real) < minimum or len(fake) < minimum:
        raise EvaluationError(f"need at least {minimum} samples per set")


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    sym = (matrix + matrix.T) / 2.0
    eigenvalues, eigenvectors = np.linalg.eigh(sym)
    eigenvalues = np.clip(eigenvalues, 0.0, None)
    return (eigenvectors * np.sqrt(eigenvalues)) @ eigenvectors.T


def fid(real: FeatureSet, fake: FeatureSet) -> float:
    """Frechet distance between Gaussian fits of the two feature sets, with
    the matrix square root stabilized by eigenvalue clamping at zero."""
    _check_pair(real, fake, minimum=2)
    mu_r, mu_f = real.features.mean(0), fake.features.mean(0)
    sigma_r = np.cov(real.features, rowvar=False).reshape(len(mu_r), len(mu_r))
    sigma_f = np.cov(fake.features, rowvar=False).reshape(len(mu_f), len(mu_f))
    sqrt_r = _psd_sqrt(sigma_r)
    cross = _psd_sqrt(sqrt_r @ sigma_f @ sqrt_r)
    value = float(
        ((mu_r - mu_f) ** 2).sum() + np.trace(sigma_r) + np.trace(sigma_f) - 2.0 * np.trace(cross)
    )
    return max(value, 0.0)


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """(x . y / f + 1)^3 over all pairs; the KID kernel."""
    f = x.shape[1]
    return (x @ y.T / f + 1.0) ** 3


def kid(
    real: FeatureSet,
    fake: FeatureSet,
    subset_size: int | None = None,
    n_subsets: int = 100,
    seed: int = 0,
) -> float:
    """Unbiased MMD^2 with the cubic polynomial kernel, averaged over random
    subsets. Near zero the estimate can legitimately be slightly negative."""
    _check_pair(real, fake, minimum=2)
    rng = np.random.default_rng(seed)
    m = subset_size or min(len(real), len(fake), 1000)
    m = min(m, len(real), len(fake))
    if m < 2:
        raise EvaluationError("subset size must be >= 2")
    estimates = []
    for _ in range(n_subsets):
        x = real.features[rng.choice(len(real), m, replace=False)]
        y = fake.features[rng.choice(len(fake), m, replace=False)]
        kxx = polynomial_kernel(x, x)
        kyy = polynomial_kernel(y, y)
        kxy = polynomial_kernel(x, y)
        term_x = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
        term_y = (kyy.sum() - np.trace(kyy)) / (m * (m - 1))
        estimates.append(term_x + term_y - 2.0 * kxy.mean())
    return float(np.mean(estimates))


class CodecFeatureExtractor:
    """Perceptual-style features from the trained image codec's encoder:
    channel-unit-normalized pre-quantization activations."""

    def __init__(self, image_codec, extractor_id: str = "codec-encoder"):
        self.codec = image_codec
        self.extractor_id = extractor_id

    def __call__(self, images: np.ndarray) -> FeatureSet:
        feats = []
        with torch.no_grad():
            for image in images:
                x = torch.from_numpy(np.ascontiguousarray(image, np.float32))
                x = x.permute(2, 0, 1).unsqueeze(0)
                z, _, _ = self.codec.encode_batch(x, quantized=False)
                z = z[0]
                norm = z.norm(dim=0, keepdim=True).clamp(min=1e-8)
                feats.append((z / norm).flatten().numpy())
        return FeatureSet(features=np.stack(feats), extractor_id=self.extractor_id)


def lpips_diversity(
    images: np.ndarray,
    pairs: int,
    feature_extractor,
    seed: int = 0,
) -> float:
    """Mean feature distance over `pairs` random distinct image pairs."""
    if len(images) < 2:
        raise EvaluationError("need at least two images")
    rng = np.random.default_rng(seed)
    feats = feature_extractor(images).features
    total = 0.0
    for _ in range(pairs):
        i, j = rng.choice(len(images), 2, replace=False)
        total += float(((feats[i] - feats[j]) ** 2).mean())
    return total / pairs


# --------------------------------------------------------------------------
# round-trip coherence
# --------------------------------------------------------------------------

def graph_reference_boxes(graph: SceneGraph) -> list[tuple[int, float, float, float, float]]:
    """Normalized (class_id, x0, y0, x1, y1) boxes: centroid +- spread/2.

    Centroids are pixel-index means, so these boxes live in pixel-center
    coordinates; a box may extend half a pixel beyond [0, 1] at the border.
    """
    boxes = []
    for node in graph.nodes:
        cx, cy = node.centroid
        w, h = node.spread
        boxes.append((node.class_id, cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2))
    return boxes


def box_iou(a, b) -> float:
    ix0, iy0 = max(a[0], b[0]), max(a[1], b[1])
    ix1, iy1 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(0.0, ix1 - ix0) * max(0.0, iy1 - iy0)
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def _match_single_image(reference, detected, threshold: float):
    """Per-class Hungarian matching at the IoU threshold.

    Returns (matched ious, true positives, false positives, false negatives).
    """
    ious, tp, fp, fn = [], 0, 0, 0
    classes = {c for c, *_ in reference} | {c for c, *_ in detected}
    for class_id in classes:
        refs = [box[1:] for box in reference if box[0] == class_id]
        dets = [box[1:] for box in detected if box[0] == class_id]
        if not refs or not dets:
            fn += len(refs)
            fp += len(dets)
            continue
        cost = np.zeros((len(refs), len(dets)))
        for i, ref in enumerate(refs):
            for j, det in enumerate(dets):
                cost[i, j] = -box_iou(ref, det)
        rows, cols = linear_sum_assignment(cost)
        matched_r, matched_d = set(), set()
        for i, j in zip(rows, cols):
            iou = -cost[i, j]
            if iou >= threshold:
                ious.append(iou)
                tp += 1
                matched_r.add(i)
                matched_d.add(j)
        fn += len(refs) - len(matched_r)
        fp += len(dets) - len(matched_d)
    return ious, tp, fp, fn


def round_trip_score(
    images: np.ndarray,
    graphs: list[SceneGraph],
    detector,
    iou_threshold: float = 0.5,
) -> tuple[float, float]:
    """(mean matched IoU, F1) at the threshold, aggregated over all images.

    With no reference boxes and no detections anywhere, both scores are 1.0
    by the vacuous-agreement convention.
    """
    if len(images) != len(graphs):
        raise EvaluationError("one conditioning graph per image required")
    if detector is None:
        raise EvaluationError("missing detector")
    all_ious, tp, fp, fn = [], 0, 0, 0
    for image, graph in zip(images, graphs):
        result = detector.detect(image)
        height, width = result.image_size
        # shift half-open pixel-index boxes into the pixel-center coordinates
        # the graph-derived reference boxes use
        detected = [
            (c, (x0 - 0.5) / width, (y0 - 0.5) / height, (x1 - 0.5) / width, (y1 - 0.5) / height)
            for c, x0, y0, x1, y1, _ in result.boxes
        ]
        reference = graph_reference_boxes(graph)
        ious, tp_i, fp_i, fn_i = _match_single_image(reference, detected, iou_threshold)
        all_ious.extend(ious)
        tp, fp, fn = tp + tp_i, fp + fp_i, fn + fn_i
    if tp + fp + fn == 0:
        return 1.0, 1.0
    f1 = 2.0 * tp / (2.0 * tp + fp + fn)
    mean_iou = float(np.mean(all_ious)) if all_ious else 0.0
    return mean_iou, f1


# --------------------------------------------------------------------------
# report assembly
# --------------------------------------------------------------------------

REPORT_COLUMNS = ("fid", "kid", "lpips_diversity", "bb_iou_at_50", "f1_at_50")


def evaluate_generation(
    real_images: np.ndarray,
    fake_images: np.ndarray,
    graphs: list[SceneGraph],
    detector,
    feature_extractor,
    diversity_pairs: int = 200,
    seed: int = 0,
) -> dict:
    """The five-column report for one batch of generations."""
    real_features = feature_extractor(real_images)
    fake_features = feature_extractor(fake_images)
    iou, f1 = round_trip_score(fake_images, graphs, detector)
    return {
        "fid": fid(real_features, fake_features),
        "kid": kid(real_features, fake_features, seed=seed),
        "lpips_diversity": lpips_diversity(
            fake_images, diversity_pairs, feature_extractor, seed=seed
        ),
        "bb_iou_at_50": iou,
        "f1_at_50": f1,
    }


def run_omega_ablation(
    pipeline,
    graphs: list[SceneGraph],
    real_images: np.ndarray,
    detector,
    feature_extractor,
    omegas=(1.0, 2.0, 3.0, 4.0, 5.0),
    n_per_graph: int = 1,
    steps: int | None = None,
    seed: int = 0,
    report_path=None,
) -> dict:
    """Sample per guidance scale and emit the five-column report per row."""
    rows = []
    for omega in omegas:
        fakes, fake_graphs = [], []
        for gi, graph in enumerate(graphs):
            out = pipeline.sample(
                graph, n=n_per_graph, omega=omega, steps=steps, seed=seed + 1000 * gi
            )
            fakes.append(out)
            fake_graphs.extend([graph] * n_per_graph)
        fake_images = np.concatenate(fakes)
        report = evaluate_generation(
            real_images, fake_images, fake_graphs, detector, feature_extractor, seed=seed
        )
        rows.append({"omega": float(omega), **report})
    result = {"columns": list(REPORT_COLUMNS), "rows": rows}
    if report_path is not None:
        Path(report_path).write_text(json.dumps(result, indent=2))
    return result
