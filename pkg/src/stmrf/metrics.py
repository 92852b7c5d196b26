"""Segmentation quality metrics: region overlap, contour accuracy, aggregates."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DimensionError, ValidationError

RECALL_THRESHOLD = 0.5
BOUNDARY_TOLERANCE_FRACTION = 0.008


def _as_binary(mask) -> np.ndarray:
    arr = mask.labels if hasattr(mask, "labels") else np.asarray(mask)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-d mask, got shape {arr.shape}")
    return arr.astype(bool)


def region_similarity(prediction, truth) -> float:
    """Intersection over union. Two empty masks agree perfectly (1.0)."""
    p = _as_binary(prediction)
    g = _as_binary(truth)
    if p.shape != g.shape:
        raise DimensionError(f"mask shapes differ: {p.shape} vs {g.shape}")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbor outside the mask.

    The image border counts as outside, so a mask flush against the frame
    edge still has a boundary there.
    """
    m = _as_binary(mask)
    padded = np.pad(m, 1, mode="constant", constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    return m & ~interior


def default_boundary_tolerance(height: int, width: int) -> int:
    """Match radius scaled to the image diagonal, at least one pixel."""
    diag = math.hypot(height, width)
    return max(1, int(math.floor(BOUNDARY_TOLERANCE_FRACTION * diag + 0.5)))


def _dilate_disc(mask: np.ndarray, radius: int) -> np.ndarray:
    if not mask.any():
        return mask
    dist = ndimage.distance_transform_edt(~mask)
    return dist <= radius


def contour_accuracy(prediction, truth, tolerance: int | None = None) -> float:
    """F-measure between mask boundaries with a distance tolerance.

    A predicted boundary pixel is a hit if it lies within tolerance of some
    true boundary pixel, and vice versa. Two boundary-free masks score 1.0;
    if exactly one side has a boundary the score is 0.0.
    """
    p = _as_binary(prediction)
    g = _as_binary(truth)
    if p.shape != g.shape:
        raise DimensionError(f"mask shapes differ: {p.shape} vs {g.shape}")
    if tolerance is None:
        tolerance = default_boundary_tolerance(*p.shape)
    if tolerance < 0:
        raise ValidationError(f"tolerance must be non-negative, got {tolerance}")
    pb = boundary_pixels(p)
    gb = boundary_pixels(g)
    np_pix = int(pb.sum())
    ng_pix = int(gb.sum())
    if np_pix == 0 and ng_pix == 0:
        return 1.0
    if np_pix == 0 or ng_pix == 0:
        return 0.0
    precision = float((pb & _dilate_disc(gb, tolerance)).sum() / np_pix)
    recall = float((gb & _dilate_disc(pb, tolerance)).sum() / ng_pix)
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class ScoreRecord:
    """Per-(sequence, object) metric pair."""

    sequence: str
    object_id: int
    region: float
    contour: float


@dataclass(frozen=True)
class AggregateReport:
    """Summary over a set of score records."""

    region_mean: float
    region_recall: float
    contour_mean: float
    contour_recall: float
    global_mean: float

    def rows(self) -> list[tuple[str, float, float]]:
        return [
            ("region", self.region_mean, self.region_recall),
            ("contour", self.contour_mean, self.contour_recall),
        ]


def aggregate(records: list[ScoreRecord]) -> AggregateReport:
    """Mean and recall per metric plus the grand mean of the two means.

    Recall is the fraction of records strictly above 0.5.
    """
    if not records:
        raise ValidationError("cannot aggregate an empty score list")
    region = np.array([r.region for r in records], dtype=np.float64)
    contour = np.array([r.contour for r in records], dtype=np.float64)
    jm = float(region.mean())
    fm = float(contour.mean())
    return AggregateReport(
        region_mean=jm,
        region_recall=float((region > RECALL_THRESHOLD).mean()),
        contour_mean=fm,
        contour_recall=float((contour > RECALL_THRESHOLD).mean()),
        global_mean=0.5 * (jm + fm),
    )


def score_sequence(sequence: str, predictions: dict[int, list],
                   truths: dict[int, list], skip_first: bool = True,
                   tolerance: int | None = None) -> list[ScoreRecord]:
    """Score every object of one sequence, averaging metrics over frames.

    skip_first drops frame 0 from the averages; that frame is given, not
    inferred.
    """
    if set(predictions) != set(truths):
        raise ValidationError("predictions and truths cover different objects")
    out = []
    for obj in sorted(predictions):
        pred = predictions[obj]
        true = truths[obj]
        if len(pred) != len(true):
            raise ValidationError(
                f"object {obj}: {len(pred)} predictions vs {len(true)} truths")
        start = 1 if skip_first and len(pred) > 1 else 0
        js = [region_similarity(p, g) for p, g in zip(pred[start:], true[start:])]
        fs = [contour_accuracy(p, g, tolerance) for p, g in zip(pred[start:], true[start:])]
        out.append(ScoreRecord(sequence, obj,
                               float(np.mean(js)), float(np.mean(fs))))
    return out
