"""Value objects shared by the whole engine.

All pixel containers are immutable: the wrapped numpy arrays are copied on
construction and marked read-only, so fields can be shared freely between
inference state, caches, and tests without defensive copies.

Pixel order is row-major. A pixel is addressed either as (row, col) or as a
flat index row * width + col.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .errors import DimensionError, SequenceTooShortError, ValidationError

# Likelihoods are kept strictly inside (0, 1) so log terms stay finite.
LIKELIHOOD_EPS = 1e-4

# Hard upper bound for exhaustive MAP enumeration (2**20 labelings).
MAX_BRUTE_FORCE_VARS = 20


def flatten_index(row: int, col: int, width: int) -> int:
    """Map (row, col) to the flat row-major pixel index."""
    return row * width + col


def unflatten_index(flat: int, width: int) -> tuple[int, int]:
    """Inverse of flatten_index."""
    return divmod(flat, width)


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, copy=True)
    out.setflags(write=False)
    return out


def _check_frame_object(frame_index: int, object_id: int) -> None:
    if frame_index < 0:
        raise ValidationError(f"frame_index must be >= 0, got {frame_index}")
    if object_id < 0:
        raise ValidationError(f"object_id must be >= 0, got {object_id}")


@dataclass(frozen=True)
class ImageFrame:
    """One RGB video frame: 8-bit triplets, shape (height, width, 3)."""

    frame_index: int
    rgb: np.ndarray

    def __post_init__(self):
        if self.frame_index < 0:
            raise ValidationError(f"frame_index must be >= 0, got {self.frame_index}")
        arr = np.asarray(self.rgb)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise DimensionError(f"rgb must have shape (h, w, 3), got {arr.shape}")
        if arr.dtype != np.uint8:
            raise ValidationError(f"rgb must be uint8, got {arr.dtype}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DimensionError(f"frame must be at least 1x1, got {arr.shape[:2]}")
        object.__setattr__(self, "rgb", _freeze(arr))

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]


@dataclass(frozen=True)
class LabelField:
    """Hard binary labeling of one frame for one object."""

    frame_index: int
    object_id: int
    labels: np.ndarray

    def __post_init__(self):
        _check_frame_object(self.frame_index, self.object_id)
        arr = np.asarray(self.labels)
        if arr.ndim != 2:
            raise DimensionError(f"labels must be 2-D, got shape {arr.shape}")
        if not np.isin(arr, (0, 1)).all():
            raise ValidationError("labels must contain only 0 and 1")
        object.__setattr__(self, "labels", _freeze(arr.astype(np.uint8)))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def to_soft(self) -> "SoftMask":
        return SoftMask(self.frame_index, self.object_id, self.labels.astype(np.float64))


@dataclass(frozen=True)
class SoftMask:
    """Relaxed labeling with per-pixel values in [0, 1]."""

    frame_index: int
    object_id: int
    values: np.ndarray

    def __post_init__(self):
        _check_frame_object(self.frame_index, self.object_id)
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2:
            raise DimensionError(f"values must be 2-D, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValidationError("mask values must be finite")
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValidationError("mask values must lie in [0, 1]")
        object.__setattr__(self, "values", _freeze(arr))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def binarize(self, threshold: float) -> LabelField:
        """Threshold at >= threshold into a hard labeling."""
        return LabelField(
            self.frame_index,
            self.object_id,
            (self.values >= threshold).astype(np.uint8),
        )


@dataclass(frozen=True)
class LikelihoodField:
    """Per-pixel foreground probability, clamped inside (0, 1).

    Values must already respect the clamp band; use clamp_likelihood to build
    a field from raw scores.
    """

    frame_index: int
    object_id: int
    probs: np.ndarray

    def __post_init__(self):
        _check_frame_object(self.frame_index, self.object_id)
        arr = np.asarray(self.probs, dtype=np.float64)
        if arr.ndim != 2:
            raise DimensionError(f"probs must be 2-D, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValidationError("likelihoods must be finite")
        if arr.size and (arr.min() < LIKELIHOOD_EPS or arr.max() > 1.0 - LIKELIHOOD_EPS):
            raise ValidationError(
                f"likelihoods must lie in [{LIKELIHOOD_EPS}, {1.0 - LIKELIHOOD_EPS}]"
            )
        object.__setattr__(self, "probs", _freeze(arr))

    @property
    def height(self) -> int:
        return self.probs.shape[0]

    @property
    def width(self) -> int:
        return self.probs.shape[1]


def clamp_likelihood(raw: np.ndarray, frame_index: int, object_id: int) -> LikelihoodField:
    """Clamp raw foreground scores into the legal band and wrap them.

    Non-finite inputs are rejected rather than clamped: they indicate an
    upstream bug, not an extreme probability.
    """
    arr = np.asarray(raw, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValidationError("raw likelihood scores must be finite")
    clipped = np.clip(arr, LIKELIHOOD_EPS, 1.0 - LIKELIHOOD_EPS)
    return LikelihoodField(frame_index, object_id, clipped)


@dataclass(frozen=True)
class FlowField:
    """Dense optical flow leaving one frame.

    vectors[r, c] = (u, v): u is the column displacement, v the row
    displacement, matching on-disk flow file layout. step is the signed frame
    offset the flow points to (target frame = source_frame + step).
    """

    source_frame: int
    step: int
    vectors: np.ndarray

    def __post_init__(self):
        if self.source_frame < 0:
            raise ValidationError(f"source_frame must be >= 0, got {self.source_frame}")
        if self.step not in (-2, -1, 1, 2):
            raise ValidationError(f"step must be one of -2, -1, 1, 2, got {self.step}")
        arr = np.asarray(self.vectors, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != 2:
            raise DimensionError(f"vectors must have shape (h, w, 2), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValidationError("flow vectors must be finite")
        object.__setattr__(self, "vectors", _freeze(arr))

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    @property
    def target_frame(self) -> int:
        return self.source_frame + self.step


@dataclass(frozen=True)
class Params:
    """Engine knobs with their documented defaults.

    theta_s = None means the spatial weight tracks the current coupling
    penalty beta wherever a beta is in scope. sigma_motion / sigma_uncertain
    = None select the documented data-driven defaults (half the previous
    bounding-box diagonal, and half the uncertainty ring radius).
    """

    theta_u: float = 1.0
    theta_t: float = 1.0
    theta_s: Optional[float] = None
    beta0: float = 1.5
    beta_growth: float = 1.2
    outer_iters: int = 3
    inner_sweeps: int = 5
    fb_tolerance: float = 1.5
    binarize_threshold: float = 0.5
    ring_radius: float = 20.0
    sigma_motion: Optional[float] = None
    sigma_uncertain: Optional[float] = None
    blob_connectivity: int = 4

    def __post_init__(self):
        for name in ("theta_u", "theta_t", "beta0", "beta_growth", "fb_tolerance",
                     "ring_radius"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise ValidationError(f"{name} must be a positive finite number, got {value!r}")
        for name in ("theta_s", "sigma_motion", "sigma_uncertain"):
            value = getattr(self, name)
            if value is not None and not (math.isfinite(value) and value > 0):
                raise ValidationError(f"{name} must be positive and finite when set, got {value!r}")
        if self.outer_iters < 1:
            raise ValidationError(f"outer_iters must be >= 1, got {self.outer_iters}")
        if self.inner_sweeps < 1:
            raise ValidationError(f"inner_sweeps must be >= 1, got {self.inner_sweeps}")
        if not (0.0 < self.binarize_threshold <= 1.0):
            raise ValidationError(
                f"binarize_threshold must be in (0, 1], got {self.binarize_threshold}")
        if self.blob_connectivity not in (4, 8):
            raise ValidationError(
                f"blob_connectivity must be 4 or 8, got {self.blob_connectivity}")

    def beta_at(self, iteration: int) -> float:
        """Coupling penalty for outer iteration k (1-based)."""
        if iteration < 1:
            raise ValidationError(f"iteration is 1-based, got {iteration}")
        return self.beta0 * self.beta_growth ** (iteration - 1)

    def spatial_weight(self, beta: float) -> float:
        """theta_s, tracking beta unless pinned explicitly."""
        return self.theta_s if self.theta_s is not None else beta


PARAM_FIELD_NAMES = tuple(f.name for f in fields(Params))


@dataclass(frozen=True)
class EnergyBreakdown:
    """Additive decomposition of a labeling's energy.

    total is stored, not derived, so a corrupted record cannot masquerade as
    consistent: construction re-checks additivity to 1e-9 relative.
    """

    unary: float
    temporal: float
    coupling: float
    spatial: float
    total: float

    def __post_init__(self):
        parts = (self.unary, self.temporal, self.coupling, self.spatial, self.total)
        if not all(math.isfinite(p) for p in parts):
            raise ValidationError("energy terms must be finite")
        expected = self.unary + self.temporal + self.coupling + self.spatial
        scale = max(1.0, abs(expected), abs(self.total))
        if abs(expected - self.total) > 1e-9 * scale:
            raise ValidationError(
                f"energy breakdown is not additive: parts sum to {expected!r}, "
                f"total says {self.total!r}")

    @classmethod
    def from_parts(cls, unary: float, temporal: float, coupling: float,
                   spatial: float) -> "EnergyBreakdown":
        return cls(unary, temporal, coupling, spatial,
                   unary + temporal + coupling + spatial)

    def as_dict(self) -> dict:
        return {
            "unary": self.unary,
            "temporal": self.temporal,
            "coupling": self.coupling,
            "spatial": self.spatial,
            "total": self.total,
        }


def validate_sequence(frames: list[ImageFrame]) -> tuple[int, int, int]:
    """Check a frame list is a coherent video; return (width, height, count).

    Frames must be contiguous from index 0 and share one geometry. A single
    frame is not a video: temporal links need at least two.
    """
    if len(frames) < 2:
        raise SequenceTooShortError(
            f"a sequence needs at least 2 frames, got {len(frames)}")
    first = frames[0]
    for pos, frame in enumerate(frames):
        if frame.frame_index != pos:
            raise ValidationError(
                f"frame at position {pos} has frame_index {frame.frame_index}; "
                "frames must be contiguous from 0")
        if (frame.height, frame.width) != (first.height, first.width):
            raise DimensionError(
                f"frame {pos} is {frame.width}x{frame.height}, expected "
                f"{first.width}x{first.height} (frame 0)")
    return first.width, first.height, len(frames)
