"""File formats and dataset layout.

A sequence directory looks like:

    frames/00000.png ...          RGB frames
    responses/<obj>/00000.png     per-object detector responses, 8-bit gray
    gt/<obj>/00000.png            reference masks (frame 0 seeds inference)
    flow/fw1_00000.flo ...        optical flow; fw/bw selects direction,
                                  the digit is the step, the number is the
                                  source frame
    masks/<obj>/00000.png         inference output

Masks are written as 0/255 grayscale PNGs; indexed-palette annotations in
the DAVIS style (palette index = object id) are also readable. Flow files
use the conventional .flo layout: a float sanity tag, two int32 dimensions,
then row-major interleaved (u, v) float32 pairs.
"""

from __future__ import annotations

import os
import struct

import numpy as np
from PIL import Image

from .datamodel import (
    FlowField,
    ImageFrame,
    LabelField,
    Params,
    SoftMask,
)
from .errors import ConfigurationError, ValidationError
from .flowgraph import LINK_STEPS
from .refine import EXEMPLAR_BINS, EXEMPLAR_DILATE_RADIUS, EXEMPLAR_LAMBDA

FLO_TAG = 202021.25
FRAME_PATTERN = "{:05d}.png"
FLOW_PATTERN = "{dir}{step}_{frame:05d}.flo"


def write_flow(path: str, flow: FlowField) -> None:
    h, w = flow.height, flow.width
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLO_TAG, w, h))
        fh.write(np.ascontiguousarray(flow.vectors, dtype="<f4").tobytes())


def read_flow(path: str, source_frame: int, step: int) -> FlowField:
    with open(path, "rb") as fh:
        header = fh.read(12)
        if len(header) != 12:
            raise ValidationError(f"{path}: truncated flow header")
        tag, w, h = struct.unpack("<fii", header)
        if abs(tag - FLO_TAG) > 1e-3:
            raise ValidationError(f"{path}: bad flow sanity tag {tag}")
        if w < 1 or h < 1:
            raise ValidationError(f"{path}: bad flow dimensions {w}x{h}")
        payload = fh.read(8 * w * h)
        if len(payload) != 8 * w * h:
            raise ValidationError(f"{path}: truncated flow payload")
    vectors = np.frombuffer(payload, dtype="<f4").reshape(h, w, 2)
    return FlowField(source_frame, step, vectors)


def write_frame(path: str, frame: ImageFrame) -> None:
    Image.fromarray(frame.rgb, mode="RGB").save(path)


def read_frame(path: str, frame_index: int) -> ImageFrame:
    with Image.open(path) as img:
        rgb = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return ImageFrame(frame_index, rgb)


def write_mask(path: str, mask: LabelField) -> None:
    Image.fromarray(mask.labels * np.uint8(255), mode="L").save(path)


def read_mask(path: str, frame_index: int, object_id: int) -> LabelField:
    """Read a binary mask; palette images select pixels equal to object_id."""
    with Image.open(path) as img:
        if img.mode == "P":
            idx = np.asarray(img)
            labels = (idx == object_id).astype(np.uint8)
        else:
            gray = np.asarray(img.convert("L"))
            labels = (gray > 127).astype(np.uint8)
    return LabelField(frame_index, object_id, labels)


def palette_object_ids(path: str) -> list[int]:
    """Nonzero palette indices present in an indexed annotation."""
    with Image.open(path) as img:
        if img.mode != "P":
            raise ValidationError(f"{path} is not an indexed-palette image")
        idx = np.asarray(img)
    return sorted(int(v) for v in np.unique(idx) if v != 0)


def write_response(path: str, response: SoftMask) -> None:
    quant = np.floor(response.values * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(quant, mode="L").save(path)


def read_response(path: str, frame_index: int, object_id: int) -> SoftMask:
    with Image.open(path) as img:
        gray = np.asarray(img.convert("L"), dtype=np.float64)
    return SoftMask(frame_index, object_id, gray / 255.0)


def _numbered(dirpath: str) -> list[tuple[int, str]]:
    if not os.path.isdir(dirpath):
        return []
    out = []
    for name in sorted(os.listdir(dirpath)):
        stem, ext = os.path.splitext(name)
        if ext.lower() == ".png" and stem.isdigit():
            out.append((int(stem), os.path.join(dirpath, name)))
    return sorted(out)


def _object_dirs(root: str) -> list[tuple[int, str]]:
    if not os.path.isdir(root):
        return []
    out = []
    for name in sorted(os.listdir(root)):
        full = os.path.join(root, name)
        if os.path.isdir(full) and name.isdigit():
            out.append((int(name), full))
    return sorted(out)


def load_frames(seq_dir: str) -> list[ImageFrame]:
    entries = _numbered(os.path.join(seq_dir, "frames"))
    if not entries:
        raise ConfigurationError(f"no frames under {seq_dir}/frames")
    if [i for i, _ in entries] != list(range(len(entries))):
        raise ConfigurationError(f"frame numbering under {seq_dir}/frames has gaps")
    return [read_frame(path, i) for i, path in entries]


def load_flows(seq_dir: str, frame_count: int,
               require_two_step: bool = False) -> list[FlowField]:
    """Load every flow file present; 1-step pairs must be complete.

    Missing 2-step files are tolerated (short sequences or datasets without
    them) unless require_two_step is set.
    """
    flow_dir = os.path.join(seq_dir, "flow")
    flows = []
    missing = []
    for t in range(frame_count):
        for step in LINK_STEPS:
            if not (0 <= t + step < frame_count):
                continue
            name = FLOW_PATTERN.format(dir="fw" if step > 0 else "bw",
                                       step=abs(step), frame=t)
            path = os.path.join(flow_dir, name)
            if os.path.exists(path):
                flows.append(read_flow(path, t, step))
            elif abs(step) == 1 or require_two_step:
                missing.append(name)
    if missing:
        raise ConfigurationError(
            f"missing flow files under {flow_dir}: {', '.join(missing[:8])}"
            + (" ..." if len(missing) > 8 else ""))
    return flows


def load_responses(seq_dir: str, frame_count: int) -> dict[int, list[SoftMask]]:
    root = os.path.join(seq_dir, "responses")
    objects = _object_dirs(root)
    if not objects:
        raise ConfigurationError(f"no response directories under {root}")
    out = {}
    for obj, obj_dir in objects:
        entries = _numbered(obj_dir)
        if [i for i, _ in entries] != list(range(frame_count)):
            raise ConfigurationError(
                f"object {obj}: expected responses for frames 0..{frame_count - 1}")
        out[obj] = [read_response(path, i, obj) for i, path in entries]
    return out


def load_annotations(seq_dir: str, objects: list[int],
                     frame_count: int | None = None,
                     first_only: bool = True) -> dict[int, list[LabelField]]:
    """Read gt masks. first_only loads just frame 0 per object."""
    root = os.path.join(seq_dir, "gt")
    out = {}
    for obj in objects:
        obj_dir = os.path.join(root, f"{obj}")
        entries = _numbered(obj_dir)
        if not entries or entries[0][0] != 0:
            raise ConfigurationError(f"object {obj}: missing gt frame 0 under {root}")
        if first_only:
            entries = entries[:1]
        elif frame_count is not None and [i for i, _ in entries] != list(range(frame_count)):
            raise ConfigurationError(
                f"object {obj}: expected gt for frames 0..{frame_count - 1}")
        out[obj] = [read_mask(path, i, obj) for i, path in entries]
    return out


def write_masks(seq_dir: str, masks: dict[int, list[LabelField]]) -> None:
    for obj, series in masks.items():
        obj_dir = os.path.join(seq_dir, "masks", f"{obj}")
        os.makedirs(obj_dir, exist_ok=True)
        for mask in series:
            write_mask(os.path.join(obj_dir, FRAME_PATTERN.format(mask.frame_index)),
                       mask)


def write_scene(seq_dir: str, scene) -> None:
    """Materialize a generated scene as a sequence directory."""
    os.makedirs(os.path.join(seq_dir, "frames"), exist_ok=True)
    os.makedirs(os.path.join(seq_dir, "flow"), exist_ok=True)
    for frame in scene.frames:
        write_frame(os.path.join(seq_dir, "frames",
                                 FRAME_PATTERN.format(frame.frame_index)), frame)
    for flow in scene.flows:
        name = FLOW_PATTERN.format(dir="fw" if flow.step > 0 else "bw",
                                   step=abs(flow.step), frame=flow.source_frame)
        write_flow(os.path.join(seq_dir, "flow", name), flow)
    for obj, series in scene.responses.items():
        obj_dir = os.path.join(seq_dir, "responses", f"{obj}")
        os.makedirs(obj_dir, exist_ok=True)
        for resp in series:
            write_response(os.path.join(obj_dir,
                                        FRAME_PATTERN.format(resp.frame_index)), resp)
    for obj, series in scene.truth.items():
        obj_dir = os.path.join(seq_dir, "gt", f"{obj}")
        os.makedirs(obj_dir, exist_ok=True)
        for mask in series:
            write_mask(os.path.join(obj_dir,
                                    FRAME_PATTERN.format(mask.frame_index)), mask)


_INT_KEYS = {"outer_iters", "inner_sweeps", "blob_connectivity", "exemplar_bins"}
_OPTIONAL_KEYS = {"theta_s", "sigma_motion", "sigma_uncertain"}
_FLOAT_KEYS = {
    "theta_u", "theta_t", "theta_s", "beta0", "beta_growth", "fb_tolerance",
    "binarize_threshold", "ring_radius", "sigma_motion", "sigma_uncertain",
    "exemplar_lambda", "exemplar_dilate_radius",
}
CONFIG_KEYS = sorted(_INT_KEYS | _FLOAT_KEYS)
_EXEMPLAR_KEYS = {"exemplar_bins", "exemplar_lambda", "exemplar_dilate_radius"}


def parse_config(text: str) -> tuple[Params, dict]:
    """Parse flat key=value engine configuration.

    Blank lines and # comments are skipped. Unknown or repeated keys are
    errors. The optional keys theta_s, sigma_motion and sigma_uncertain
    accept the literal value auto, meaning derive at run time. Returns the
    parameter set and the exemplar-refiner options.
    """
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _INT_KEYS and key not in _FLOAT_KEYS:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigurationError(f"line {lineno}: key {key!r} repeated")
        if key in _OPTIONAL_KEYS and value.lower() == "auto":
            seen[key] = None
            continue
        try:
            seen[key] = int(value) if key in _INT_KEYS else float(value)
        except ValueError as exc:
            raise ConfigurationError(
                f"line {lineno}: bad value {value!r} for {key}") from exc

    exemplar = {
        "bins_per_channel": seen.pop("exemplar_bins", EXEMPLAR_BINS),
        "lambda_prior": seen.pop("exemplar_lambda", EXEMPLAR_LAMBDA),
        "dilate_radius": seen.pop("exemplar_dilate_radius", EXEMPLAR_DILATE_RADIUS),
    }
    try:
        params = Params(**seen)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"bad parameter values: {exc}") from exc
    return params, exemplar


def load_config(path: str) -> tuple[Params, dict]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def format_config(params: Params, exemplar: dict | None = None) -> str:
    """Render a parameter set back to the flat config format."""
    lines = []
    for name in ("theta_u", "theta_t", "theta_s", "beta0", "beta_growth",
                 "outer_iters", "inner_sweeps", "fb_tolerance",
                 "binarize_threshold", "ring_radius", "sigma_motion",
                 "sigma_uncertain", "blob_connectivity"):
        value = getattr(params, name)
        if value is None:
            value = "auto"
        lines.append(f"{name}={value}")
    if exemplar:
        lines.append(f"exemplar_bins={exemplar['bins_per_channel']}")
        lines.append(f"exemplar_lambda={exemplar['lambda_prior']}")
        lines.append(f"exemplar_dilate_radius={exemplar['dilate_radius']}")
    return "\n".join(lines) + "\n"
