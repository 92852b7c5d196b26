"""Alternating inference: temporal fusion sweeps and mask refinement.

The label volume x (one binary field per object per frame) is fused along
temporal links by coordinate descent while a relaxed field y, produced by
the refiner, pulls each pixel through a quadratic coupling whose penalty
grows every outer iteration. Because all pairwise links are inter-frame,
updating one frame's pixels simultaneously is exactly sequential raster
coordinate descent, so sweeps are vectorized per frame.

Frames are processed in ascending order within a sweep; a pixel therefore
sees already-updated labels in earlier frames and previous-sweep labels in
later frames. y stays frozen for the whole fusion step of an iteration.
"""

from __future__ import annotations

import enum
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .datamodel import (
    EnergyBreakdown,
    ImageFrame,
    LabelField,
    LikelihoodField,
    Params,
    SoftMask,
)
from .energy import decoupled_energy, fusion_objective
from .errors import (
    ConfigurationError,
    DimensionError,
    EngineError,
    ValidationError,
)
from .flowgraph import TemporalGraph
from .refine import Refiner

THREADS_ENV = "STMRF_THREADS"


class AblationMode(enum.Enum):
    """Which halves of the alternation run.

    In TF_ONLY the relaxed field shadows the fused labels after every
    iteration; in MR_ONLY the labels are rebuilt from the previous relaxed
    field instead of fused.
    """

    TF_ONLY = "tf-only"
    MR_ONLY = "mr-only"
    TF_AND_MR = "tf-mr"


def icm_update_pixel(prev_label: int, y_value: float, prob: float,
                     neighbor_labels, neighbor_weights, beta: float,
                     params: Params) -> int:
    """Exact conditional minimizer for one pixel, neighbors held fixed.

    Scalar reference for the vectorized sweep. Ties keep the previous label.
    """
    if prev_label not in (0, 1):
        raise ValidationError(f"prev_label must be 0 or 1, got {prev_label}")
    if len(neighbor_labels) != len(neighbor_weights):
        raise ValidationError("neighbor labels and weights differ in length")
    if len(neighbor_labels) > 4:
        raise ValidationError(f"a pixel has at most 4 links, got {len(neighbor_labels)}")
    cost = []
    for lab in (0, 1):
        c = -params.theta_u * float(np.log(prob if lab == 1 else 1.0 - prob))
        c += 0.5 * beta * (lab - y_value) ** 2
        for n, w in zip(neighbor_labels, neighbor_weights):
            c += params.theta_t * w * (lab - n) ** 2
        cost.append(c)
    if cost[1] < cost[0]:
        return 1
    if cost[0] < cost[1]:
        return 0
    return prev_label


def _log_tables(probs: np.ndarray, theta_u: float):
    u1 = -theta_u * np.log(probs)
    u0 = -theta_u * np.log(1.0 - probs)
    return u0, u1


def temporal_fusion(x: np.ndarray, y: np.ndarray, graph: TemporalGraph,
                    probs: np.ndarray, beta: float, params: Params,
                    sweeps: int | None = None,
                    record_objective: bool = False):
    """Run coordinate-descent sweeps over the whole volume.

    Returns (new labels, objective values), one objective per executed sweep
    when record_objective is set (empty list otherwise). Stops early when a
    sweep changes nothing, which also certifies single-flip local optimality.
    """
    expected = (graph.frame_count, graph.height, graph.width)
    for name, arr in (("x", x), ("y", y), ("probs", probs)):
        if arr.shape != expected:
            raise DimensionError(f"{name} has shape {arr.shape}, expected {expected}")
    if beta < 0 or not np.isfinite(beta):
        raise ValidationError(f"beta must be >= 0, got {beta}")
    n_sweeps = params.inner_sweeps if sweeps is None else sweeps
    if n_sweeps < 1:
        raise ValidationError(f"sweeps must be >= 1, got {n_sweeps}")

    cur = x.astype(np.uint8).copy()
    flat = cur.reshape(graph.frame_count, -1)
    y_flat = y.reshape(graph.frame_count, -1).astype(np.float64)
    u0, u1 = _log_tables(probs.reshape(graph.frame_count, -1), params.theta_u)
    couple1 = 0.5 * beta * (1.0 - y_flat) ** 2
    couple0 = 0.5 * beta * y_flat ** 2

    objectives = []
    for _ in range(n_sweeps):
        changed = False
        for t in range(graph.frame_count):
            c1 = u1[t] + couple1[t]
            c0 = u0[t] + couple0[t]
            for k in (-2, -1, 1, 2):
                arr = graph.target_array(t, k)
                if arr is None:
                    continue
                valid = arr >= 0
                if not valid.any():
                    continue
                w = params.theta_t * graph.slot_weight(t, k)
                n_lab = flat[t + k][arr[valid]]
                c1[valid] += w * (n_lab == 0)
                c0[valid] += w * (n_lab == 1)
            prev = flat[t]
            new = np.where(c1 < c0, 1, np.where(c0 < c1, 0, prev)).astype(np.uint8)
            if not changed and not np.array_equal(new, prev):
                changed = True
            flat[t] = new
        if record_objective:
            objectives.append(fusion_objective(cur, y, graph, probs, beta, params))
        if not changed:
            break
    return cur, objectives


def mask_refinement(x: np.ndarray, frames: list[ImageFrame], refiner: Refiner,
                    object_id: int, threshold: float = 0.5) -> np.ndarray:
    """Refine every frame's labels; returns the stacked relaxed field.

    Worker count comes from the STMRF_THREADS environment variable (default
    1); results are keyed by frame, so the schedule cannot reorder them.
    """
    if x.shape[0] != len(frames):
        raise DimensionError(f"{x.shape[0]} label frames vs {len(frames)} images")

    def one(t: int) -> np.ndarray:
        coarse = SoftMask(t, object_id, x[t].astype(np.float64))
        refined = refiner.refine(frames[t], coarse)
        if refined.values.shape != x[t].shape:
            raise ValidationError(
                f"refiner returned shape {refined.values.shape} for frame {t}, "
                f"expected {x[t].shape}")
        return refined.values

    workers = _worker_count()
    out = np.empty(x.shape, dtype=np.float64)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for t, values in enumerate(pool.map(one, range(len(frames)))):
                out[t] = values
    else:
        for t in range(len(frames)):
            out[t] = one(t)
    return out


def _worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    return max(n, 1)


def _connectivity_structure(connectivity: int) -> np.ndarray:
    if connectivity == 4:
        return np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
    return np.ones((3, 3), dtype=bool)


def resolve_overlaps(x_by_obj: dict[int, np.ndarray], graph: TemporalGraph,
                     probs_by_obj: dict[int, np.ndarray],
                     y_by_obj: dict[int, np.ndarray], beta: float,
                     params: Params) -> dict[int, np.ndarray]:
    """Make per-object supports disjoint, one contested blob at a time.

    Pixels claimed by two or more objects are grouped into connected blobs
    per frame. Each blob goes wholly to the object whose assignment (blob
    all-1 for it, all-0 for everyone else) minimizes the restricted label
    objective: coupling + unary over the blob plus link terms incident to
    it, evaluated against current labels outside. Ties pick the lowest
    object id. Frames ascend and blobs follow label order, each decision
    seeing the ones already applied.
    """
    objs = sorted(x_by_obj)
    if set(probs_by_obj) != set(objs) or set(y_by_obj) != set(objs):
        raise ValidationError("x, probs and y must cover the same objects")
    out = {o: x_by_obj[o].astype(np.uint8).copy() for o in objs}
    if len(objs) < 2:
        return out
    structure = _connectivity_structure(params.blob_connectivity)
    n_pix = graph.pixels_per_frame

    for t in range(graph.frame_count):
        claims = np.zeros((graph.height, graph.width), dtype=np.int32)
        for o in objs:
            claims += out[o][t]
        overlap = claims >= 2
        if not overlap.any():
            continue
        blobs, n_blobs = ndimage.label(overlap, structure=structure)
        for blob_id in range(1, n_blobs + 1):
            blob = (blobs == blob_id).ravel()
            pix = np.nonzero(blob)[0]
            contenders = [o for o in objs if out[o][t].ravel()[pix].any()]
            best_obj = None
            best_cost = None
            for cand in contenders:
                cost = 0.0
                for o in objs:
                    assign = 1 if o == cand else 0
                    p = probs_by_obj[o][t].ravel()[pix]
                    cost += float(-params.theta_u
                                  * np.log(p if assign == 1 else 1.0 - p).sum())
                    yv = y_by_obj[o][t].ravel()[pix]
                    cost += 0.5 * beta * float(((assign - yv) ** 2).sum())
                    x_o = out[o].reshape(graph.frame_count, n_pix)
                    for k in (-2, -1, 1, 2):
                        arr = graph.target_array(t, k)
                        if arr is None:
                            continue
                        tq = arr[pix]
                        valid = tq >= 0
                        if not valid.any():
                            continue
                        w = params.theta_t * graph.slot_weight(t, k)
                        n_lab = x_o[t + k][tq[valid]]
                        cost += w * float((n_lab != assign).sum())
                if best_cost is None or cost < best_cost:
                    best_cost = cost
                    best_obj = cand
            for o in objs:
                plane = out[o][t].ravel()
                plane[pix] = 1 if o == best_obj else 0
                out[o][t] = plane.reshape(graph.height, graph.width)
    return out


@dataclass
class InferenceState:
    """Mutable state of the alternating loop (exposed for inspection)."""

    iteration: int
    beta: float
    x_by_obj: dict[int, np.ndarray]
    y_by_obj: dict[int, np.ndarray]

    def __post_init__(self):
        if self.iteration < 0:
            raise ValidationError(f"iteration must be >= 0, got {self.iteration}")
        if self.beta <= 0 or not np.isfinite(self.beta):
            raise ValidationError(f"beta must be positive, got {self.beta}")


@dataclass
class InferenceResult:
    """Final per-object labelings plus the per-iteration energy trace.

    states holds a per-iteration snapshot of every object's label volume when
    the run was asked to record them (empty otherwise).
    """

    masks: dict[int, list[LabelField]]
    energy_trace: list[EnergyBreakdown] = field(default_factory=list)
    states: list[dict[int, np.ndarray]] = field(default_factory=list)


def _stack_labels(fields_list: list[LabelField], graph: TemporalGraph) -> np.ndarray:
    if len(fields_list) != graph.frame_count:
        raise DimensionError(
            f"{len(fields_list)} label fields for {graph.frame_count} frames")
    stack = np.zeros((graph.frame_count, graph.height, graph.width), dtype=np.uint8)
    for t, f in enumerate(fields_list):
        if f.frame_index != t:
            raise ValidationError(f"label field at position {t} says frame {f.frame_index}")
        if (f.height, f.width) != (graph.height, graph.width):
            raise DimensionError(f"label field {t} has the wrong geometry")
        stack[t] = f.labels
    return stack


def _stack_probs(fields_list: list[LikelihoodField], graph: TemporalGraph) -> np.ndarray:
    if len(fields_list) != graph.frame_count:
        raise DimensionError(
            f"{len(fields_list)} likelihood fields for {graph.frame_count} frames")
    stack = np.zeros((graph.frame_count, graph.height, graph.width), dtype=np.float64)
    for t, f in enumerate(fields_list):
        if f.frame_index != t:
            raise ValidationError(
                f"likelihood field at position {t} says frame {f.frame_index}")
        if (f.height, f.width) != (graph.height, graph.width):
            raise DimensionError(f"likelihood field {t} has the wrong geometry")
        stack[t] = f.probs
    return stack


def _sum_breakdowns(parts: list[EnergyBreakdown]) -> EnergyBreakdown:
    return EnergyBreakdown.from_parts(
        sum(p.unary for p in parts),
        sum(p.temporal for p in parts),
        sum(p.coupling for p in parts),
        sum(p.spatial for p in parts),
    )


def run_inference(initial: dict[int, list[LabelField]],
                  frames: list[ImageFrame], graph: TemporalGraph,
                  likelihoods: dict[int, list[LikelihoodField]],
                  refiner: Refiner, params: Params,
                  mode: AblationMode = AblationMode.TF_AND_MR,
                  record_states: bool = False) -> InferenceResult:
    """Alternate fusion and refinement for the configured outer iterations.

    Multi-object runs arbitrate contested pixels right after every label
    update, so the label step and the arbitration minimize the same
    objective and refinement always sees disjoint supports. The final masks
    are the binarized relaxed fields, arbitrated again for multi-object runs
    because per-object refinement can recreate overlaps. On a refiner
    failure the partial energy trace is attached to the raised error as
    .energy_trace.
    """
    if not initial:
        raise ValidationError("no objects to infer")
    if set(initial) != set(likelihoods):
        raise ValidationError("initial labels and likelihoods cover different objects")
    if len(frames) != graph.frame_count:
        raise DimensionError(
            f"{len(frames)} frames supplied, graph expects {graph.frame_count}")
    objs = sorted(initial)
    x = {o: _stack_labels(initial[o], graph) for o in objs}
    probs = {o: _stack_probs(likelihoods[o], graph) for o in objs}
    y = {o: x[o].astype(np.float64) for o in objs}

    trace: list[EnergyBreakdown] = []
    states: list[dict[int, np.ndarray]] = []
    beta = params.beta_at(1)
    try:
        for k in range(1, params.outer_iters + 1):
            beta = params.beta_at(k)
            if mode is AblationMode.MR_ONLY:
                for o in objs:
                    x[o] = (y[o] >= params.binarize_threshold).astype(np.uint8)
            else:
                for o in objs:
                    x[o], _ = temporal_fusion(x[o], y[o], graph, probs[o], beta, params)
            if len(objs) > 1:
                x = resolve_overlaps(x, graph, probs, y, beta, params)
            if mode is AblationMode.TF_ONLY:
                for o in objs:
                    y[o] = x[o].astype(np.float64)
            else:
                for o in objs:
                    y[o] = mask_refinement(x[o], frames, refiner, o,
                                           params.binarize_threshold)
            trace.append(_sum_breakdowns([
                decoupled_energy(x[o], y[o], graph, probs[o], frames, refiner,
                                 beta, params, o)
                for o in objs
            ]))
            if record_states:
                states.append({o: x[o].copy() for o in objs})
    except EngineError as exc:
        exc.energy_trace = trace
        raise

    final = {o: (y[o] >= params.binarize_threshold).astype(np.uint8) for o in objs}
    if len(objs) > 1:
        final = resolve_overlaps(final, graph, probs, y, beta, params)
    masks = {
        o: [LabelField(t, o, final[o][t]) for t in range(graph.frame_count)]
        for o in objs
    }
    return InferenceResult(masks=masks, energy_trace=trace, states=states)
