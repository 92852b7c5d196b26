"""Temporal pixel graph built from forward/backward optical flow.

Pixels of frame t are linked to pixels of frames t-2, t-1, t+1, t+2 by
following the flow and keeping only round-trip-consistent links, so each
pixel carries at most one link per step value and at most four links total.

The graph is stored as one int32 array per (frame, step): entry p holds the
flat index of p's partner in frame t+step, or -1. An undirected link always
appears in both directions' arrays, which makes the one-link-per-step
invariant structural rather than checked after the fact.

Link weights depend only on the frame pair: both endpoints' confidences
decay geometrically with frame index (later frames have drifted further from
the annotated first frame) down to a floor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import FlowField, LabelField, SoftMask, unflatten_index
from .errors import DimensionError, ValidationError

CONFIDENCE_DECAY = 0.9
CONFIDENCE_FLOOR = 0.3
LINK_STEPS = (-2, -1, 1, 2)


def frame_confidence(frame_number: int) -> float:
    """Confidence of a frame, 1-based: max(0.9**(c-1), 0.3)."""
    if frame_number < 1:
        raise ValidationError(f"frame_number is 1-based, got {frame_number}")
    return max(CONFIDENCE_DECAY ** (frame_number - 1), CONFIDENCE_FLOOR)


def edge_weight(conf_a: float, conf_b: float) -> float:
    """Weight of a temporal link: the product of its endpoint confidences."""
    for c in (conf_a, conf_b):
        if not (0.0 < c <= 1.0):
            raise ValidationError(f"confidence must be in (0, 1], got {c}")
    return conf_a * conf_b


def round_half_away(values: np.ndarray) -> np.ndarray:
    """Round to nearest integer with ties going away from zero."""
    return np.trunc(values + np.copysign(0.5, values)).astype(np.int64)


def check_forward_backward(forward: FlowField, backward: FlowField,
                           tolerance: float) -> np.ndarray:
    """Round-trip consistency mask for every pixel of the forward flow's frame.

    A pixel p is consistent when its target q = round(p + forward(p)) lies in
    bounds and ||forward(p) + backward(q)||_2 <= tolerance (absolute pixels).
    Occluded pixels fail because the surface visible at q moved differently.
    """
    if forward.vectors.shape != backward.vectors.shape:
        raise DimensionError(
            f"flow shapes differ: {forward.vectors.shape} vs {backward.vectors.shape}")
    if backward.source_frame != forward.target_frame or backward.step != -forward.step:
        raise ValidationError(
            f"backward flow must leave frame {forward.target_frame} with step "
            f"{-forward.step}, got frame {backward.source_frame} step {backward.step}")
    if tolerance <= 0:
        raise ValidationError(f"tolerance must be positive, got {tolerance}")

    h, w = forward.height, forward.width
    rows, cols = np.mgrid[0:h, 0:w]
    fwd = forward.vectors.astype(np.float64)
    tr = round_half_away(rows + fwd[:, :, 1])
    tc = round_half_away(cols + fwd[:, :, 0])
    in_bounds = (tr >= 0) & (tr < h) & (tc >= 0) & (tc < w)

    ok = np.zeros((h, w), dtype=bool)
    tr_c = np.clip(tr, 0, h - 1)
    tc_c = np.clip(tc, 0, w - 1)
    bwd = backward.vectors.astype(np.float64)[tr_c, tc_c]
    residual = np.sqrt(((fwd + bwd) ** 2).sum(axis=2))
    ok[in_bounds & (residual <= tolerance)] = True
    return ok


@dataclass(frozen=True)
class TemporalEdge:
    """One undirected temporal link between pixels of two frames."""

    frame_a: int
    pixel_a: int
    frame_b: int
    pixel_b: int
    weight: float

    def endpoints(self) -> frozenset:
        return frozenset(((self.frame_a, self.pixel_a), (self.frame_b, self.pixel_b)))


class TemporalGraph:
    """Immutable link structure over a whole sequence."""

    def __init__(self, width: int, height: int, frame_count: int,
                 targets: dict[tuple[int, int], np.ndarray]):
        if width < 1 or height < 1:
            raise DimensionError(f"bad dims {width}x{height}")
        if frame_count < 2:
            raise ValidationError(f"graph needs >= 2 frames, got {frame_count}")
        self.width = width
        self.height = height
        self.frame_count = frame_count
        self.pixels_per_frame = width * height
        self._targets = {}
        for (t, k), arr in targets.items():
            if k not in LINK_STEPS:
                raise ValidationError(f"bad step {k}")
            if not (0 <= t < frame_count and 0 <= t + k < frame_count):
                raise ValidationError(f"slot ({t},{k}) leaves the sequence")
            a = np.asarray(arr, dtype=np.int32)
            if a.shape != (self.pixels_per_frame,):
                raise DimensionError(f"slot ({t},{k}) has shape {a.shape}")
            a = a.copy()
            a.setflags(write=False)
            self._targets[(t, k)] = a
        self._weights = {
            (t, k): edge_weight(frame_confidence(t + 1), frame_confidence(t + k + 1))
            for (t, k) in self._targets
        }

    def target_array(self, frame: int, step: int) -> np.ndarray | None:
        """Per-pixel partner indices for one (frame, step) slot, or None."""
        return self._targets.get((frame, step))

    def slot_weight(self, frame: int, step: int) -> float:
        return edge_weight(frame_confidence(frame + 1),
                           frame_confidence(frame + step + 1))

    def neighbors(self, frame: int, pixel: int) -> list[TemporalEdge]:
        """All links incident to one pixel, ordered by step value."""
        if not (0 <= frame < self.frame_count):
            raise ValidationError(f"frame {frame} out of range")
        if not (0 <= pixel < self.pixels_per_frame):
            raise ValidationError(f"pixel {pixel} out of range")
        out = []
        for k in LINK_STEPS:
            arr = self._targets.get((frame, k))
            if arr is None:
                continue
            q = int(arr[pixel])
            if q >= 0:
                out.append(TemporalEdge(frame, pixel, frame + k, q,
                                        self._weights[(frame, k)]))
        return out

    def degree_array(self, frame: int) -> np.ndarray:
        """Number of links per pixel of one frame."""
        deg = np.zeros(self.pixels_per_frame, dtype=np.int32)
        for k in LINK_STEPS:
            arr = self._targets.get((frame, k))
            if arr is not None:
                deg += (arr >= 0).astype(np.int32)
        return deg

    def iter_edges(self):
        """Yield every undirected link exactly once (from its earlier frame)."""
        for (t, k) in sorted(self._targets):
            if k < 0:
                continue
            arr = self._targets[(t, k)]
            weight = self._weights[(t, k)]
            sources = np.nonzero(arr >= 0)[0]
            for p in sources:
                yield TemporalEdge(t, int(p), t + k, int(arr[p]), weight)

    def edge_count(self) -> int:
        return int(sum((arr >= 0).sum()
                       for (t, k), arr in self._targets.items() if k > 0))


def build_temporal_graph(flows: list[FlowField], width: int, height: int,
                         frame_count: int, tolerance: float) -> TemporalGraph:
    """Assemble the pruned link structure from a bag of flow fields.

    Links are discovered from both endpoints (a pair (t, +k) uses the forward
    flow of t and the backward flow of t+k; the same physical link is also
    found from t+k's side) and deduplicated. When two near-consistent
    discoveries disagree about a pixel's partner for one step value, the
    first discovery wins; pairs are processed in ascending (frame, |step|)
    order and pixels in raster order, so the outcome is deterministic.
    """
    if frame_count < 2:
        raise ValidationError(f"graph needs >= 2 frames, got {frame_count}")
    by_key: dict[tuple[int, int], FlowField] = {}
    for f in flows:
        if (f.height, f.width) != (height, width):
            raise DimensionError(
                f"flow for frame {f.source_frame} step {f.step} is "
                f"{f.width}x{f.height}, expected {width}x{height}")
        if not (0 <= f.source_frame < frame_count):
            raise ValidationError(f"flow source frame {f.source_frame} out of range")
        if not (0 <= f.target_frame < frame_count):
            raise ValidationError(
                f"flow from frame {f.source_frame} step {f.step} targets "
                f"frame {f.target_frame}, outside the sequence")
        key = (f.source_frame, f.step)
        if key in by_key:
            raise ValidationError(f"duplicate flow for frame {key[0]} step {key[1]}")
        by_key[key] = f

    n = width * height
    targets: dict[tuple[int, int], np.ndarray] = {}

    def slot(t: int, k: int) -> np.ndarray:
        key = (t, k)
        if key not in targets:
            targets[key] = np.full(n, -1, dtype=np.int32)
        return targets[key]

    # Ascending frame then |step| keeps discovery order deterministic.
    pair_keys = sorted(by_key, key=lambda key: (key[0], abs(key[1]), key[1]))
    for (t, k) in pair_keys:
        fwd = by_key[(t, k)]
        back = by_key.get((t + k, -k))
        if back is None:
            continue  # a lone one-directional field cannot be consistency-checked
        ok = check_forward_backward(fwd, back, tolerance).ravel()
        vec = fwd.vectors.reshape(n, 2).astype(np.float64)
        rows, cols = np.divmod(np.arange(n), width)
        tr = round_half_away(rows + vec[:, 1])
        tc = round_half_away(cols + vec[:, 0])
        q = tr * width + tc

        fwd_slot = slot(t, k)
        rev_slot = slot(t + k, -k)
        sources = np.nonzero(ok)[0]  # ascending = raster order
        qs = q[sources]
        # A source whose own slot or whose target's slot is already taken is
        # either a rediscovery of a stored link (skip: dedup) or a conflicting
        # near-consistent discovery (skip: the earlier discovery won). Slots
        # filled earlier never free up, so only free-free pairs can store.
        free = (fwd_slot[sources] == -1) & (rev_slot[qs] == -1)
        cand_src = sources[free]
        cand_q = qs[free]
        # Several free sources may aim at one free target; raster-first wins.
        order = np.argsort(cand_q, kind="stable")
        uniq_q, first_pos = np.unique(cand_q[order], return_index=True)
        take = order[first_pos]
        fwd_slot[cand_src[take]] = cand_q[take]
        rev_slot[uniq_q] = cand_src[take]

    return TemporalGraph(width, height, frame_count, targets)


def warp_mask(mask, flow: FlowField):
    """Carry a mask onto the flow's source frame by reverse lookup.

    flow must be the backward flow attached to the *target* frame of the
    warp: output(p) = input(p + flow(p)). Soft masks are sampled bilinearly,
    hard labelings with nearest neighbor; samples falling outside the input
    are 0. Returns a SoftMask on flow.source_frame.
    """
    if isinstance(mask, LabelField):
        values = mask.labels.astype(np.float64)
        bilinear = False
    elif isinstance(mask, SoftMask):
        values = mask.values
        bilinear = True
    else:
        raise ValidationError(f"cannot warp a {type(mask).__name__}")
    if (flow.height, flow.width) != (mask.height, mask.width):
        raise DimensionError(
            f"flow is {flow.width}x{flow.height}, mask is {mask.width}x{mask.height}")

    h, w = flow.height, flow.width
    rows, cols = np.mgrid[0:h, 0:w]
    vec = flow.vectors.astype(np.float64)
    src_r = rows + vec[:, :, 1]
    src_c = cols + vec[:, :, 0]

    if bilinear:
        r0 = np.floor(src_r).astype(np.int64)
        c0 = np.floor(src_c).astype(np.int64)
        fr = src_r - r0
        fc = src_c - c0
        out = np.zeros((h, w), dtype=np.float64)
        for dr, dc, wgt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                            (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
            rr = r0 + dr
            cc = c0 + dc
            inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
            sample = np.zeros((h, w), dtype=np.float64)
            sample[inside] = values[rr[inside], cc[inside]]
            out += wgt * sample
        out = np.clip(out, 0.0, 1.0)
    else:
        rr = round_half_away(src_r)
        cc = round_half_away(src_c)
        inside = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        out = np.zeros((h, w), dtype=np.float64)
        out[inside] = values[np.clip(rr, 0, h - 1), np.clip(cc, 0, w - 1)][inside]

    return SoftMask(flow.source_frame, mask.object_id, out)


def describe_pixel(graph: TemporalGraph, frame: int, pixel: int) -> str:
    """Human-readable link summary for diagnostics."""
    row, col = unflatten_index(pixel, graph.width)
    parts = [f"frame {frame} pixel ({row},{col})"]
    for e in graph.neighbors(frame, pixel):
        tr, tc = unflatten_index(e.pixel_b, graph.width)
        parts.append(f"  -> frame {e.frame_b} ({tr},{tc}) w={e.weight:.6f}")
    return "\n".join(parts)
