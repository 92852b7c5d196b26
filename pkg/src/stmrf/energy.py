"""Energy terms for the label field and its relaxed companion.

The objective being minimized splits into four additive parts:

  unary      -theta_u * log p(x_i)          per pixel
  temporal   theta_t * w_ij * (x_i - x_j)^2  per link
  coupling   (beta / 2) * (x_i - y_i)^2      per pixel
  spatial    theta_s * ||y_c - refine(y_c)||^2  per frame

The hard labels x live on the temporal graph; the relaxed field y carries
the refiner's opinion. With labels in {0, 1} the squared difference in the
temporal term is simply a disagreement indicator.
"""

from __future__ import annotations

import math

import numpy as np

from .datamodel import (
    LIKELIHOOD_EPS,
    EnergyBreakdown,
    Params,
)
from .errors import DimensionError, ValidationError
from .flowgraph import TemporalGraph


def unary_energy(label: int, prob: float, theta_u: float) -> float:
    """-theta_u * ln(prob of the chosen label).

    prob is the foreground likelihood; choosing label 0 scores its
    complement. Out-of-band probabilities are rejected, not clamped: the
    caller owns clamping.
    """
    if label not in (0, 1):
        raise ValidationError(f"label must be 0 or 1, got {label}")
    if not (LIKELIHOOD_EPS <= prob <= 1.0 - LIKELIHOOD_EPS):
        raise ValidationError(
            f"likelihood {prob} outside [{LIKELIHOOD_EPS}, {1 - LIKELIHOOD_EPS}]")
    if theta_u <= 0 or not math.isfinite(theta_u):
        raise ValidationError(f"theta_u must be positive, got {theta_u}")
    p = prob if label == 1 else 1.0 - prob
    return -theta_u * math.log(p)


def temporal_energy(label_i: int, label_j: int, weight: float, theta_t: float) -> float:
    """theta_t * w_ij * (x_i - x_j)^2 for one link."""
    for lab in (label_i, label_j):
        if lab not in (0, 1):
            raise ValidationError(f"labels must be 0 or 1, got {lab}")
    if weight < 0 or not math.isfinite(weight):
        raise ValidationError(f"weight must be >= 0, got {weight}")
    if theta_t <= 0 or not math.isfinite(theta_t):
        raise ValidationError(f"theta_t must be positive, got {theta_t}")
    return theta_t * weight * (label_i - label_j) ** 2


def coupling_energy_field(x: np.ndarray, y: np.ndarray, beta: float) -> float:
    """(beta / 2) * sum (x - y)^2 over one or more frames."""
    if x.shape != y.shape:
        raise DimensionError(f"x {x.shape} vs y {y.shape}")
    if beta < 0 or not math.isfinite(beta):
        raise ValidationError(f"beta must be >= 0, got {beta}")
    d = x.astype(np.float64) - y.astype(np.float64)
    return 0.5 * beta * float((d * d).sum())


def unary_energy_field(labels: np.ndarray, probs: np.ndarray, theta_u: float) -> float:
    """Sum of unary terms over one or more frames (vectorized)."""
    if labels.shape != probs.shape:
        raise DimensionError(f"labels {labels.shape} vs probs {probs.shape}")
    p = np.where(labels.astype(bool), probs, 1.0 - probs)
    return float(-theta_u * np.log(p).sum())


def temporal_energy_field(x: np.ndarray, graph: TemporalGraph, theta_t: float) -> float:
    """Sum of link terms over the whole sequence, each link counted once.

    x is the stacked label volume, shape (frames, height, width).
    """
    _check_stack(x, graph)
    flat = x.reshape(graph.frame_count, -1)
    total = 0.0
    for t in range(graph.frame_count):
        for k in (1, 2):
            arr = graph.target_array(t, k)
            if arr is None:
                continue
            src = np.nonzero(arr >= 0)[0]
            if src.size == 0:
                continue
            disagree = flat[t, src] != flat[t + k, arr[src]]
            total += graph.slot_weight(t, k) * float(disagree.sum())
    return theta_t * total


def spatial_energy(y_values: np.ndarray, refined_values: np.ndarray,
                   theta_s: float) -> float:
    """theta_s * ||y - refine(y)||^2 for one frame."""
    if y_values.shape != refined_values.shape:
        raise DimensionError(f"y {y_values.shape} vs refined {refined_values.shape}")
    if theta_s < 0 or not math.isfinite(theta_s):
        raise ValidationError(f"theta_s must be >= 0, got {theta_s}")
    d = y_values.astype(np.float64) - refined_values.astype(np.float64)
    return theta_s * float((d * d).sum())


def _check_stack(stack: np.ndarray, graph: TemporalGraph) -> None:
    expected = (graph.frame_count, graph.height, graph.width)
    if stack.shape != expected:
        raise DimensionError(f"stack shape {stack.shape}, graph expects {expected}")


def fusion_objective(x: np.ndarray, y: np.ndarray, graph: TemporalGraph,
                     probs: np.ndarray, beta: float, params: Params) -> float:
    """The label-update objective: unary + temporal + coupling (y fixed)."""
    _check_stack(x, graph)
    _check_stack(y, graph)
    _check_stack(probs, graph)
    return (unary_energy_field(x, probs, params.theta_u)
            + temporal_energy_field(x, graph, params.theta_t)
            + coupling_energy_field(x, y, beta))


def decoupled_energy(x: np.ndarray, y: np.ndarray, graph: TemporalGraph,
                     probs: np.ndarray, frames, refiner, beta: float,
                     params: Params, object_id: int = 0) -> EnergyBreakdown:
    """Full relaxed objective for a (labels, relaxed-field) pair.

    The spatial part re-runs the refiner on y frame by frame, so it costs one
    refinement pass. theta_s tracks beta unless pinned in params.
    """
    from .datamodel import SoftMask  # local: avoids import cycle in type use

    _check_stack(x, graph)
    _check_stack(y, graph)
    _check_stack(probs, graph)
    if len(frames) != graph.frame_count:
        raise DimensionError(
            f"{len(frames)} frames supplied, graph expects {graph.frame_count}")
    theta_s = params.spatial_weight(beta)
    unary = unary_energy_field(x, probs, params.theta_u)
    temporal = temporal_energy_field(x, graph, params.theta_t)
    coupling = coupling_energy_field(x, y, beta)
    spatial = 0.0
    for t in range(graph.frame_count):
        y_mask = SoftMask(t, object_id, y[t])
        refined = refiner.refine(frames[t], y_mask)
        spatial += spatial_energy(y[t], refined.values, theta_s)
    return EnergyBreakdown.from_parts(unary, temporal, coupling, spatial)


def full_energy(x: np.ndarray, graph: TemporalGraph, probs: np.ndarray,
                frames, refiner, params: Params,
                object_id: int = 0) -> EnergyBreakdown:
    """Energy of a hard labeling alone (no relaxed field).

    Equivalent to the decoupled objective at y = x, where the coupling term
    vanishes. With no beta in scope, a tracking theta_s resolves to beta0.
    """
    breakdown = decoupled_energy(x, x.astype(np.float64), graph, probs, frames,
                                 refiner, params.beta0, params, object_id)
    return EnergyBreakdown.from_parts(breakdown.unary, breakdown.temporal, 0.0,
                                      breakdown.spatial)
