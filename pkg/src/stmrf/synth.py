"""Synthetic scenes with exact optical flow and exhaustive-search references.

Scenes are layered 2-d shapes translating at constant integer velocities over
a flat background. Because motion is integer-valued, the true flow between
any two frames is known exactly, and so is the set of pixels whose flow link
is genuine (target in bounds and showing the same surface). That validity
record is what graph construction is tested against.

Response maps mimic an imperfect detector: the true mask with independent
pixel flips, optionally attenuated over a frame window to simulate the
detector losing the object.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .datamodel import (
    MAX_BRUTE_FORCE_VARS,
    FlowField,
    ImageFrame,
    LabelField,
    Params,
    SoftMask,
)
from .energy import fusion_objective
from .errors import SceneSpecError, SizeError
from .flowgraph import LINK_STEPS, TemporalGraph

MAX_NOISE_AMPLITUDE = 7


@dataclass(frozen=True)
class SceneShape:
    """One moving shape. object_id None means untracked scenery.

    position is the frame-0 anchor: top-left corner for rectangles, center
    for discs. Velocity is integer pixels per frame (row, col), so supports
    stay pixel-aligned and flows are exact.
    """

    kind: str
    position: tuple[int, int]
    velocity: tuple[int, int]
    color: tuple[int, int, int]
    object_id: int | None = None
    size: tuple[int, int] | None = None
    radius: int | None = None

    def __post_init__(self):
        if self.kind not in ("rect", "disc"):
            raise SceneSpecError(f"unknown shape kind {self.kind!r}")
        if self.kind == "rect":
            if self.size is None or self.size[0] < 1 or self.size[1] < 1:
                raise SceneSpecError("rect needs a positive size")
            if self.radius is not None:
                raise SceneSpecError("rect does not take a radius")
        else:
            if self.radius is None or self.radius < 1:
                raise SceneSpecError("disc needs a positive radius")
            if self.size is not None:
                raise SceneSpecError("disc does not take a size")
        if self.object_id is not None and self.object_id < 1:
            raise SceneSpecError("tracked object ids start at 1")
        if any(not (0 <= c <= 255) for c in self.color):
            raise SceneSpecError(f"color out of range: {self.color}")

    def support(self, t: int, height: int, width: int) -> np.ndarray:
        r = self.position[0] + t * self.velocity[0]
        c = self.position[1] + t * self.velocity[1]
        out = np.zeros((height, width), dtype=bool)
        if self.kind == "rect":
            r0, r1 = max(r, 0), min(r + self.size[0], height)
            c0, c1 = max(c, 0), min(c + self.size[1], width)
            if r0 < r1 and c0 < c1:
                out[r0:r1, c0:c1] = True
        else:
            rows, cols = np.mgrid[0:height, 0:width]
            out = (rows - r) ** 2 + (cols - c) ** 2 <= self.radius ** 2
        return out


@dataclass(frozen=True)
class ResponseDropout:
    """Attenuates one object's response maps over a frame window."""

    object_id: int
    start: int
    length: int
    scale: float

    def __post_init__(self):
        if self.length < 1 or self.start < 0:
            raise SceneSpecError("dropout window must be non-empty and start at >= 0")
        if not (0.0 <= self.scale < 1.0):
            raise SceneSpecError(f"dropout scale must be in [0, 1), got {self.scale}")

    def covers(self, frame: int) -> bool:
        return self.start <= frame < self.start + self.length


@dataclass(frozen=True)
class SceneSpec:
    """Complete description of a synthetic sequence."""

    width: int
    height: int
    frame_count: int
    shapes: tuple
    background: tuple[int, int, int] = (16, 16, 16)
    background_velocity: tuple[int, int] = (0, 0)
    noise_amplitude: int = 0
    flip_rate: float = 0.0
    dropouts: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise SceneSpecError("frame geometry must be positive")
        if self.frame_count < 2:
            raise SceneSpecError("a sequence needs at least 2 frames")
        if not self.shapes:
            raise SceneSpecError("a scene needs at least one shape")
        if not (0 <= self.noise_amplitude <= MAX_NOISE_AMPLITUDE):
            raise SceneSpecError(
                f"noise amplitude must be 0..{MAX_NOISE_AMPLITUDE} to keep "
                f"colors separable, got {self.noise_amplitude}")
        if not (0.0 <= self.flip_rate < 0.5):
            raise SceneSpecError(f"flip rate must be in [0, 0.5), got {self.flip_rate}")
        if any(not (0 <= c <= 255) for c in self.background):
            raise SceneSpecError(f"background color out of range: {self.background}")
        if len(self.background_velocity) != 2:
            raise SceneSpecError("background velocity needs two components")
        tracked = self.object_ids()
        for d in self.dropouts:
            if d.object_id not in tracked:
                raise SceneSpecError(f"dropout names unknown object {d.object_id}")
        for i, s in enumerate(self.shapes):
            if not s.support(0, self.height, self.width).any():
                raise SceneSpecError(f"shape {i} is out of bounds at frame 0")

    def object_ids(self) -> list[int]:
        ids = sorted({s.object_id for s in self.shapes if s.object_id is not None})
        if not ids:
            raise SceneSpecError("no tracked objects in scene")
        return ids

    def to_dict(self) -> dict:
        shapes = []
        for s in self.shapes:
            d = {"kind": s.kind, "position": list(s.position),
                 "velocity": list(s.velocity), "color": list(s.color),
                 "object_id": s.object_id}
            if s.kind == "rect":
                d["size"] = list(s.size)
            else:
                d["radius"] = s.radius
            shapes.append(d)
        return {
            "width": self.width, "height": self.height,
            "frame_count": self.frame_count, "shapes": shapes,
            "background": list(self.background),
            "background_velocity": list(self.background_velocity),
            "noise_amplitude": self.noise_amplitude,
            "flip_rate": self.flip_rate,
            "dropouts": [{"object_id": d.object_id, "start": d.start,
                          "length": d.length, "scale": d.scale}
                         for d in self.dropouts],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        allowed = {"width", "height", "frame_count", "shapes", "background",
                   "background_velocity", "noise_amplitude", "flip_rate",
                   "dropouts", "seed"}
        unknown = set(data) - allowed
        if unknown:
            raise SceneSpecError(f"unknown scene keys: {sorted(unknown)}")
        missing = {"width", "height", "frame_count", "shapes"} - set(data)
        if missing:
            raise SceneSpecError(f"missing scene keys: {sorted(missing)}")
        shape_allowed = {"kind", "position", "velocity", "color", "object_id",
                         "size", "radius"}
        shapes = []
        for i, sd in enumerate(data["shapes"]):
            unknown = set(sd) - shape_allowed
            if unknown:
                raise SceneSpecError(f"shape {i}: unknown keys {sorted(unknown)}")
            try:
                shapes.append(SceneShape(
                    kind=sd["kind"],
                    position=tuple(int(v) for v in sd["position"]),
                    velocity=tuple(int(v) for v in sd["velocity"]),
                    color=tuple(int(v) for v in sd["color"]),
                    object_id=sd.get("object_id"),
                    size=tuple(int(v) for v in sd["size"]) if "size" in sd else None,
                    radius=int(sd["radius"]) if "radius" in sd else None,
                ))
            except (KeyError, TypeError, ValueError) as exc:
                raise SceneSpecError(f"shape {i} is malformed: {exc}") from exc
        dropouts = tuple(
            ResponseDropout(object_id=int(d["object_id"]), start=int(d["start"]),
                            length=int(d["length"]), scale=float(d["scale"]))
            for d in data.get("dropouts", ()))
        return cls(
            width=int(data["width"]), height=int(data["height"]),
            frame_count=int(data["frame_count"]), shapes=tuple(shapes),
            background=tuple(int(v) for v in data.get("background", (16, 16, 16))),
            background_velocity=tuple(
                int(v) for v in data.get("background_velocity", (0, 0))),
            noise_amplitude=int(data.get("noise_amplitude", 0)),
            flip_rate=float(data.get("flip_rate", 0.0)),
            dropouts=dropouts, seed=int(data.get("seed", 0)))

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SceneSpecError(f"scene spec is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise SceneSpecError("scene spec must be a JSON object")
        return cls.from_dict(data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


@dataclass
class SynthScene:
    """Everything generate_scene produces for one spec."""

    spec: SceneSpec
    frames: list
    truth: dict
    responses: dict
    flows: list
    valid_links: dict = field(default_factory=dict)

    @property
    def first_annotations(self) -> dict:
        return {obj: series[0] for obj, series in self.truth.items()}


def corrupt_mask(mask, flip_rate: float, seed) -> np.ndarray:
    """Flip each pixel independently with probability flip_rate."""
    if not (0.0 <= flip_rate < 1.0):
        raise SceneSpecError(f"flip rate must be in [0, 1), got {flip_rate}")
    arr = mask.labels if isinstance(mask, LabelField) else np.asarray(mask)
    rng = np.random.default_rng(seed)
    flips = rng.random(arr.shape) < flip_rate
    out = (arr.astype(bool) ^ flips).astype(np.uint8)
    if isinstance(mask, LabelField):
        return LabelField(mask.frame_index, mask.object_id, out)
    return out


def _surface_map(spec: SceneSpec, t: int) -> np.ndarray:
    """Topmost shape index + 1 per pixel; 0 is background."""
    surf = np.zeros((spec.height, spec.width), dtype=np.int32)
    for i, s in enumerate(spec.shapes):
        surf[s.support(t, spec.height, spec.width)] = i + 1
    return surf


def generate_scene(spec: SceneSpec) -> SynthScene:
    """Render frames, truth masks, exact flows, validity records, responses."""
    h, w = spec.height, spec.width
    surfaces = [_surface_map(spec, t) for t in range(spec.frame_count)]
    velocities = np.zeros((len(spec.shapes) + 1, 2), dtype=np.int64)
    velocities[0] = spec.background_velocity
    for i, s in enumerate(spec.shapes):
        velocities[i + 1] = s.velocity

    frames = []
    for t in range(spec.frame_count):
        rgb = np.empty((h, w, 3), dtype=np.int64)
        rgb[:] = spec.background
        for i, s in enumerate(spec.shapes):
            rgb[surfaces[t] == i + 1] = s.color
        if spec.noise_amplitude:
            rng = np.random.default_rng([spec.seed, 3, t])
            rgb += rng.integers(-spec.noise_amplitude, spec.noise_amplitude + 1,
                                size=rgb.shape)
        frames.append(ImageFrame(t, np.clip(rgb, 0, 255).astype(np.uint8)))

    truth = {}
    for obj in spec.object_ids():
        series = []
        for t in range(spec.frame_count):
            mask = np.zeros((h, w), dtype=np.uint8)
            for i, s in enumerate(spec.shapes):
                if s.object_id == obj:
                    mask[surfaces[t] == i + 1] = 1
            series.append(LabelField(t, obj, mask))
        truth[obj] = series

    rows, cols = np.mgrid[0:h, 0:w]
    flows = []
    valid = {}
    for t in range(spec.frame_count):
        for k in LINK_STEPS:
            if not (0 <= t + k < spec.frame_count):
                continue
            vel = velocities[surfaces[t]]
            vec = np.empty((h, w, 2), dtype=np.float32)
            vec[..., 0] = k * vel[..., 1]
            vec[..., 1] = k * vel[..., 0]
            flows.append(FlowField(t, k, vec))
            tr = rows + k * vel[..., 0]
            tc = cols + k * vel[..., 1]
            inb = (tr >= 0) & (tr < h) & (tc >= 0) & (tc < w)
            ok = np.zeros((h, w), dtype=bool)
            ok[inb] = surfaces[t + k][tr[inb], tc[inb]] == surfaces[t][inb]
            valid[(t, k)] = ok

    responses = {}
    for obj in spec.object_ids():
        series = []
        for t in range(spec.frame_count):
            noisy = corrupt_mask(truth[obj][t].labels, spec.flip_rate,
                                 [spec.seed, 11, obj, t]).astype(np.float64)
            for d in spec.dropouts:
                if d.object_id == obj and d.covers(t):
                    noisy = noisy * d.scale
            series.append(SoftMask(t, obj, noisy))
        responses[obj] = series

    return SynthScene(spec=spec, frames=frames, truth=truth,
                      responses=responses, flows=flows, valid_links=valid)


def brute_force_map(graph: TemporalGraph, probs: np.ndarray, beta: float,
                    params: Params, y: np.ndarray | None = None):
    """Exhaustive minimum of the fusion objective over all labelings.

    probs has shape (frames, height, width); y, when given, matches it and
    adds the quadratic coupling term. Enumeration order makes pixel 0 the
    most significant bit, so among equal-energy labelings the one whose
    flattened label vector is lexicographically smallest wins.
    """
    c, h, w = probs.shape
    n = c * h * w
    if n > MAX_BRUTE_FORCE_VARS:
        raise SizeError(
            f"{n} binary variables exceed the exhaustive-search cap of "
            f"{MAX_BRUTE_FORCE_VARS}")
    if (graph.frame_count, graph.height, graph.width) != (c, h, w):
        raise SizeError("graph geometry does not match the probability stack")

    p = probs.reshape(n)
    u1 = -params.theta_u * np.log(p)
    u0 = -params.theta_u * np.log1p(-p)
    if y is not None:
        yf = np.asarray(y, dtype=np.float64).reshape(n)
        u1 = u1 + 0.5 * beta * (1.0 - yf) ** 2
        u0 = u0 + 0.5 * beta * yf ** 2

    count = 1 << n
    codes = np.arange(count, dtype=np.uint64)
    energy = np.zeros(count, dtype=np.float64)
    bits = np.empty((count, n), dtype=bool)
    for j in range(n):
        bits[:, j] = (codes >> np.uint64(n - 1 - j)) & np.uint64(1) == 1
        energy += np.where(bits[:, j], u1[j], u0[j])

    for edge in graph.iter_edges():
        a = (edge.frame_a * h * w) + edge.pixel_a
        b = (edge.frame_b * h * w) + edge.pixel_b
        disagree = bits[:, a] != bits[:, b]
        energy += params.theta_t * edge.weight * disagree

    best = int(np.argmin(energy))
    labels = bits[best].astype(np.uint8).reshape(c, h, w)
    return labels, float(energy[best])


def check_optimum(labels: np.ndarray, y: np.ndarray | None,
                  graph: TemporalGraph, probs: np.ndarray, beta: float,
                  params: Params) -> float:
    """Fusion objective of a given labeling, for comparing against a search."""
    x = np.ascontiguousarray(labels, dtype=np.uint8)
    if y is None:
        y = x.astype(np.float64)
        beta = 0.0
    return fusion_objective(x, np.asarray(y, dtype=np.float64), graph, probs,
                            beta, params)
