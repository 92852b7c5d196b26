"""Bootstrap labelings and likelihoods from per-frame response maps.

The first frame's labeling is given. Every later frame combines its raw
response map, reweighted by a Gaussian prior around the object's predicted
position, with the previous frame's fused response carried over by optical
flow; the maximum of the two is binarized into the initial labeling.

Likelihoods are stratified from each initial labeling: confident foreground
inside, a decaying uncertainty ring around it, confident background outside.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

from .datamodel import (
    LabelField,
    LikelihoodField,
    Params,
    SoftMask,
    clamp_likelihood,
)
from .errors import ConfigurationError, DimensionError, ValidationError
from .flowgraph import warp_mask

FG_LIKELIHOOD = 0.99
BG_LIKELIHOOD = 0.01
RING_PEAK = 0.7
MIN_SIGMA = 1.0


def centroid(labels: np.ndarray) -> tuple[float, float]:
    """Center of mass (row, col) of the foreground."""
    rows, cols = np.nonzero(labels)
    if rows.size == 0:
        raise ValidationError("centroid of an empty labeling is undefined")
    return float(rows.mean()), float(cols.mean())


def bbox_half_diagonal(labels: np.ndarray) -> float:
    """Half the diagonal of the foreground bounding box, floored at 1 px."""
    rows, cols = np.nonzero(labels)
    if rows.size == 0:
        raise ValidationError("bounding box of an empty labeling is undefined")
    h = float(rows.max() - rows.min() + 1)
    w = float(cols.max() - cols.min() + 1)
    return max(0.5 * math.hypot(h, w), MIN_SIGMA)


def predict_centroid(history) -> tuple[float, float]:
    """Linear motion extrapolation from a centroid history.

    Two or more entries extrapolate the last step; a single entry predicts
    itself. An empty history is a caller bug.
    """
    pts = list(history)
    if not pts:
        raise ConfigurationError("cannot predict from an empty centroid history")
    if len(pts) == 1:
        return (float(pts[0][0]), float(pts[0][1]))
    (r1, c1), (r2, c2) = pts[-2], pts[-1]
    return (2.0 * r2 - r1, 2.0 * c2 - c1)


def gaussian_position_prior(center: tuple[float, float], sigma: float,
                            height: int, width: int) -> np.ndarray:
    """exp(-d^2 / (2 sigma^2)) around the grid point nearest to center.

    Snapping the center to the grid makes the peak value exactly 1 at one
    pixel. The center may lie outside the frame; the prior then decays from
    the border inward.
    """
    if sigma <= 0 or not math.isfinite(sigma):
        raise ValidationError(f"sigma must be positive, got {sigma}")
    cr = math.floor(center[0] + 0.5) if center[0] >= 0 else -math.floor(-center[0] + 0.5)
    cc = math.floor(center[1] + 0.5) if center[1] >= 0 else -math.floor(-center[1] + 0.5)
    rows, cols = np.mgrid[0:height, 0:width]
    d2 = (rows - cr) ** 2.0 + (cols - cc) ** 2.0
    return np.exp(-d2 / (2.0 * sigma * sigma))


def fuse_response(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pointwise maximum of two response maps."""
    if a.shape != b.shape:
        raise DimensionError(f"response shapes differ: {a.shape} vs {b.shape}")
    return np.maximum(a, b)


def binarize(values: np.ndarray, threshold: float) -> np.ndarray:
    """Hard labels: 1 where value >= threshold."""
    if not (0.0 < threshold <= 1.0):
        raise ValidationError(f"threshold must be in (0, 1], got {threshold}")
    return (np.asarray(values) >= threshold).astype(np.uint8)


def build_likelihood(labeling: LabelField, ring_radius: float,
                     sigma_uncertain: float | None = None) -> LikelihoodField:
    """Stratified foreground likelihood around a hard labeling.

    Foreground pixels score 0.99. Background pixels within ring_radius of the
    foreground get 0.7 * exp(-d^2 / (2 sigma^2)) where d is the Euclidean
    distance to the nearest foreground pixel (sigma defaults to half the
    radius); everything further scores 0.01. An empty labeling is all
    background.
    """
    if ring_radius <= 0 or not math.isfinite(ring_radius):
        raise ValidationError(f"ring_radius must be positive, got {ring_radius}")
    sigma = ring_radius / 2.0 if sigma_uncertain is None else sigma_uncertain
    if sigma <= 0 or not math.isfinite(sigma):
        raise ValidationError(f"sigma_uncertain must be positive, got {sigma}")
    fg = labeling.labels.astype(bool)
    raw = np.full(fg.shape, BG_LIKELIHOOD, dtype=np.float64)
    if fg.any():
        dist = ndimage.distance_transform_edt(~fg)
        ring = (~fg) & (dist <= ring_radius)
        raw[ring] = RING_PEAK * np.exp(-dist[ring] ** 2 / (2.0 * sigma * sigma))
        raw[fg] = FG_LIKELIHOOD
    return clamp_likelihood(raw, labeling.frame_index, labeling.object_id)


def initialize_object(responses: list[SoftMask], backward_flows: dict,
                      first_annotation: LabelField,
                      params: Params) -> tuple[list[LabelField], list[LikelihoodField]]:
    """Run the bootstrap chain for one object over a whole sequence.

    responses holds one map per frame (frame 0's map is ignored: the given
    annotation wins). backward_flows maps frame index t >= 1 to the flow
    leaving frame t with step -1. Empty intermediate labelings keep the
    motion model floating: the prediction advances by its last step and the
    last valid spread is reused.
    """
    if not responses:
        raise ConfigurationError("no response maps supplied")
    frame_count = len(responses)
    if not first_annotation.labels.any():
        raise ConfigurationError(
            f"first-frame annotation for object {first_annotation.object_id} is empty")
    h, w = first_annotation.height, first_annotation.width
    obj = first_annotation.object_id
    for t, r in enumerate(responses):
        if (r.height, r.width) != (h, w):
            raise DimensionError(f"response {t} has the wrong geometry")
        if r.frame_index != t:
            raise ValidationError(f"response at position {t} says frame {r.frame_index}")

    labels = [LabelField(0, obj, first_annotation.labels)]
    likes = [build_likelihood(labels[0], params.ring_radius, params.sigma_uncertain)]
    fused_prev = first_annotation.labels.astype(np.float64)
    centers = [centroid(labels[0].labels)]
    spread = bbox_half_diagonal(labels[0].labels)

    for t in range(1, frame_count):
        flow = backward_flows.get(t)
        if flow is None:
            raise ConfigurationError(f"missing backward flow for frame pair ({t}, {t - 1})")
        if flow.source_frame != t or flow.step != -1:
            raise ValidationError(
                f"flow for frame {t} must have source {t} and step -1, got "
                f"source {flow.source_frame} step {flow.step}")
        prediction = predict_centroid(centers)
        sigma = params.sigma_motion if params.sigma_motion is not None else spread
        prior = gaussian_position_prior(prediction, sigma, h, w)
        weighted = responses[t].values * prior
        carried = warp_mask(SoftMask(t - 1, obj, fused_prev), flow)
        fused = fuse_response(weighted, carried.values)
        lab = LabelField(t, obj, binarize(fused, params.binarize_threshold))
        labels.append(lab)
        likes.append(build_likelihood(lab, params.ring_radius, params.sigma_uncertain))
        fused_prev = fused
        if lab.labels.any():
            centers.append(centroid(lab.labels))
            spread = bbox_half_diagonal(lab.labels)
        else:
            centers.append(prediction)
    return labels, likes


def initialize_sequence(responses_by_obj: dict[int, list[SoftMask]],
                        flows, first_annotations: dict[int, LabelField],
                        params: Params):
    """Bootstrap every object; returns (labels, likelihoods) keyed by object.

    flows may be any iterable of flow fields; only the 1-step backward ones
    are consumed here.
    """
    if set(responses_by_obj) != set(first_annotations):
        raise ConfigurationError(
            "responses and first-frame annotations cover different objects")
    if not responses_by_obj:
        raise ConfigurationError("no objects to initialize")
    backward = {}
    for f in flows:
        if f.step == -1:
            backward[f.source_frame] = f
    labels = {}
    likes = {}
    for obj in sorted(responses_by_obj):
        labels[obj], likes[obj] = initialize_object(
            responses_by_obj[obj], backward, first_annotations[obj], params)
    return labels, likes
