"""Mask refinement backends.

A refiner maps (frame, coarse mask) to a cleaned-up mask of the same frame.
The inference loop treats it as a black box: anything conforming to the
Refiner interface can slot in, from the identity pass-through used in
ablations to an external process reached over a socket.
"""

from __future__ import annotations

import select
import shlex
import socket
import struct
import subprocess
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import protocol
from .datamodel import ImageFrame, LabelField, SoftMask
from .errors import (
    ConfigurationError,
    DimensionError,
    ProtocolError,
    RefinementError,
    ValidationError,
)

EXEMPLAR_BINS = 16
EXEMPLAR_LAMBDA = 0.5
EXEMPLAR_DILATE_RADIUS = 5.0
PRIOR_FLOOR = 0.1
PRIOR_CEIL = 0.9
SCORE_THRESHOLD = 0.5
SUPPORT_THRESHOLD = 0.5


class Refiner(ABC):
    """Per-frame mask cleanup interface."""

    @abstractmethod
    def refine(self, frame: ImageFrame, coarse: SoftMask) -> SoftMask:
        """Return a refined mask for frame; must match the frame's geometry."""

    def close(self) -> None:
        """Release any held resources (default: nothing to release)."""


def _check_pair(frame: ImageFrame, coarse: SoftMask) -> None:
    if (frame.height, frame.width) != (coarse.height, coarse.width):
        raise DimensionError(
            f"mask is {coarse.width}x{coarse.height}, frame is "
            f"{frame.width}x{frame.height}")
    if frame.frame_index != coarse.frame_index:
        raise ValidationError(
            f"mask is for frame {coarse.frame_index}, image is frame "
            f"{frame.frame_index}")


class IdentityRefiner(Refiner):
    """Returns the coarse mask unchanged."""

    def refine(self, frame: ImageFrame, coarse: SoftMask) -> SoftMask:
        _check_pair(frame, coarse)
        return coarse


class OracleRefiner(Refiner):
    """Returns stored reference masks, ignoring the coarse input entirely."""

    def __init__(self, reference: dict[tuple[int, int], LabelField]):
        self._reference = dict(reference)

    @classmethod
    def from_masks(cls, masks) -> "OracleRefiner":
        """Accepts a flat iterable of masks or a mapping object -> mask list."""
        if hasattr(masks, "values"):
            flat = [m for series in masks.values() for m in series]
        else:
            flat = list(masks)
        ref = {}
        for m in flat:
            key = (m.frame_index, m.object_id)
            if key in ref:
                raise ConfigurationError(f"duplicate reference mask for {key}")
            ref[key] = m
        return cls(ref)

    def refine(self, frame: ImageFrame, coarse: SoftMask) -> SoftMask:
        _check_pair(frame, coarse)
        key = (coarse.frame_index, coarse.object_id)
        ref = self._reference.get(key)
        if ref is None:
            raise ConfigurationError(
                f"no reference mask for frame {key[0]} object {key[1]}")
        return ref.to_soft()


@dataclass(frozen=True)
class ExemplarModel:
    """First-frame color statistics for one object.

    posterior[b] is the probability that a pixel whose quantized color falls
    in joint bin b belongs to the object, combining Laplace-smoothed color
    likelihoods with area-fraction priors.
    """

    object_id: int
    bins_per_channel: int
    posterior: np.ndarray

    def posterior_map(self, rgb: np.ndarray) -> np.ndarray:
        """Per-pixel object probability from color alone."""
        step = 256 // self.bins_per_channel
        q = (rgb.astype(np.int64) // step)
        idx = (q[:, :, 0] * self.bins_per_channel + q[:, :, 1]) \
            * self.bins_per_channel + q[:, :, 2]
        return self.posterior[idx]


def build_exemplar_model(frame: ImageFrame, annotation: LabelField,
                         bins_per_channel: int = EXEMPLAR_BINS) -> ExemplarModel:
    """Fit the color model on an annotated frame.

    Histograms get one pseudo-count per bin; the class prior is the annotated
    area fraction. An empty annotation has no foreground to model.
    """
    if bins_per_channel < 1 or 256 % bins_per_channel != 0:
        raise ValidationError(
            f"bins_per_channel must divide 256, got {bins_per_channel}")
    if (frame.height, frame.width) != (annotation.height, annotation.width):
        raise DimensionError("annotation does not match the frame")
    fg = annotation.labels.astype(bool)
    n_fg = int(fg.sum())
    n_bg = fg.size - n_fg
    if n_fg == 0:
        raise ValidationError("annotation has no foreground pixels to model")

    step = 256 // bins_per_channel
    q = frame.rgb.astype(np.int64) // step
    idx = (q[:, :, 0] * bins_per_channel + q[:, :, 1]) * bins_per_channel + q[:, :, 2]
    n_bins = bins_per_channel ** 3
    fg_hist = np.bincount(idx[fg], minlength=n_bins).astype(np.float64) + 1.0
    bg_hist = np.bincount(idx[~fg], minlength=n_bins).astype(np.float64) + 1.0
    like_fg = fg_hist / (n_fg + n_bins)
    like_bg = bg_hist / (n_bg + n_bins)
    prior_fg = n_fg / (n_fg + n_bg)
    num = like_fg * prior_fg
    den = num + like_bg * (1.0 - prior_fg)
    return ExemplarModel(annotation.object_id, bins_per_channel, num / den)


def _disc_dilate(mask: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean dilation: everything within `radius` of the mask."""
    if not mask.any():
        return mask.copy()
    dist = ndimage.distance_transform_edt(~mask)
    return dist <= radius


def exemplar_refine(model: ExemplarModel, frame: ImageFrame, coarse: SoftMask,
                    lambda_prior: float = EXEMPLAR_LAMBDA,
                    dilate_radius: float = EXEMPLAR_DILATE_RADIUS) -> SoftMask:
    """Re-segment one frame from first-frame color statistics.

    Pipeline: blend the color posterior with a spatial prior built from the
    coarse mask (its support dilated, mapped onto [0.1, 0.9]); threshold the
    blended score at 0.5; keep candidate components (8-connected) that touch
    the coarse support; fill enclosed holes. The output is hard 0/1.
    """
    _check_pair(frame, coarse)
    if not (0.0 <= lambda_prior < 1.0):
        raise ValidationError(f"lambda_prior must be in [0, 1), got {lambda_prior}")
    support = coarse.values >= SUPPORT_THRESHOLD
    prior = np.where(_disc_dilate(support, dilate_radius), PRIOR_CEIL, PRIOR_FLOOR)
    posterior = model.posterior_map(frame.rgb)
    score = posterior ** (1.0 - lambda_prior) * prior ** lambda_prior
    candidate = score >= SCORE_THRESHOLD

    keep = np.zeros_like(candidate)
    if candidate.any() and support.any():
        labels, count = ndimage.label(candidate, structure=np.ones((3, 3), bool))
        touched = np.unique(labels[support & candidate])
        touched = touched[touched > 0]
        if touched.size:
            keep = np.isin(labels, touched)
    if keep.any():
        keep = ndimage.binary_fill_holes(keep)
    return SoftMask(coarse.frame_index, coarse.object_id, keep.astype(np.float64))


class ExemplarRefiner(Refiner):
    """Color-exemplar refinement with one model per object."""

    def __init__(self, models: dict[int, ExemplarModel],
                 lambda_prior: float = EXEMPLAR_LAMBDA,
                 dilate_radius: float = EXEMPLAR_DILATE_RADIUS):
        self._models = dict(models)
        self._lambda = lambda_prior
        self._radius = dilate_radius

    @classmethod
    def from_first_frame(cls, frame: ImageFrame, annotations,
                         bins_per_channel: int = EXEMPLAR_BINS,
                         lambda_prior: float = EXEMPLAR_LAMBDA,
                         dilate_radius: float = EXEMPLAR_DILATE_RADIUS) -> "ExemplarRefiner":
        models = {}
        items = annotations.values() if hasattr(annotations, "values") else annotations
        for ann in items:
            if ann.object_id in models:
                raise ConfigurationError(
                    f"duplicate first-frame annotation for object {ann.object_id}")
            models[ann.object_id] = build_exemplar_model(frame, ann, bins_per_channel)
        if not models:
            raise ConfigurationError("no first-frame annotations supplied")
        return cls(models, lambda_prior, dilate_radius)

    def refine(self, frame: ImageFrame, coarse: SoftMask) -> SoftMask:
        model = self._models.get(coarse.object_id)
        if model is None:
            raise ConfigurationError(f"no color model for object {coarse.object_id}")
        return exemplar_refine(model, frame, coarse, self._lambda, self._radius)


class _TcpTransport:
    def __init__(self, host: str, port: int, timeout: float):
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise RefinementError(f"cannot connect to {host}:{port}: {exc}") from exc

    def send(self, payload: bytes, deadline: float) -> None:
        self._sock.settimeout(max(deadline - time.monotonic(), 0.001))
        try:
            self._sock.sendall(payload)
        except socket.timeout as exc:
            raise RefinementError("timed out sending to refiner") from exc
        except OSError as exc:
            raise RefinementError(f"refiner connection failed: {exc}") from exc

    def read_exactly(self, n: int, deadline: float) -> bytes:
        chunks = []
        got = 0
        while got < n:
            self._sock.settimeout(max(deadline - time.monotonic(), 0.001))
            try:
                chunk = self._sock.recv(n - got)
            except socket.timeout as exc:
                raise RefinementError("timed out waiting for refiner reply") from exc
            except OSError as exc:
                raise RefinementError(f"refiner connection failed: {exc}") from exc
            if not chunk:
                raise ProtocolError("refiner closed the connection mid-message")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


class _StdioTransport:
    def __init__(self, command: str):
        argv = shlex.split(command)
        if not argv:
            raise ConfigurationError("empty stdio refiner command")
        try:
            self._proc = subprocess.Popen(
                argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        except OSError as exc:
            raise RefinementError(f"cannot launch refiner {argv[0]!r}: {exc}") from exc

    def send(self, payload: bytes, deadline: float) -> None:
        try:
            self._proc.stdin.write(payload)
            self._proc.stdin.flush()
        except (OSError, ValueError) as exc:
            raise RefinementError(f"refiner process rejected input: {exc}") from exc

    def read_exactly(self, n: int, deadline: float) -> bytes:
        fd = self._proc.stdout.fileno()
        chunks = []
        got = 0
        while got < n:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise RefinementError("timed out waiting for refiner reply")
            ready, _, _ = select.select([fd], [], [], remaining)
            if not ready:
                raise RefinementError("timed out waiting for refiner reply")
            chunk = self._proc.stdout.read1(n - got)
            if not chunk:
                raise ProtocolError("refiner process closed its output mid-message")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def close(self) -> None:
        for stream in (self._proc.stdin, self._proc.stdout):
            try:
                stream.close()
            except OSError:
                pass
        self._proc.terminate()
        try:
            self._proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self._proc.kill()
            self._proc.wait()


class ExternalRefiner(Refiner):
    """Client for an external refinement process.

    The endpoint is either "host:port" (stream socket) or
    "stdio:<command line>" (a subprocess spoken to over stdin/stdout). The
    connection handshakes once and is reused across calls. Every call gets a
    fresh deadline; a slow or silent server raises RefinementError, malformed
    bytes raise ProtocolError.
    """

    def __init__(self, endpoint: str, timeout: float = 30.0):
        if timeout <= 0:
            raise ValidationError(f"timeout must be positive, got {timeout}")
        self._endpoint = endpoint
        self._timeout = timeout
        self._transport = None

    def _connect(self):
        endpoint = self._endpoint
        if endpoint.startswith("stdio:"):
            transport = _StdioTransport(endpoint[len("stdio:"):])
        else:
            if endpoint.startswith("tcp://"):
                endpoint = endpoint[len("tcp://"):]
            host, sep, port_text = endpoint.rpartition(":")
            if not sep or not host:
                raise ConfigurationError(
                    f"endpoint {self._endpoint!r} is neither host:port nor stdio:<cmd>")
            try:
                port = int(port_text)
            except ValueError:
                raise ConfigurationError(
                    f"bad port in endpoint {self._endpoint!r}") from None
            transport = _TcpTransport(host, port, self._timeout)
        deadline = time.monotonic() + self._timeout
        transport.send(protocol.encode_handshake(), deadline)
        reply = transport.read_exactly(8, deadline)
        try:
            protocol.decode_handshake_reply(reply)
        except ProtocolError:
            transport.close()
            raise
        self._transport = transport

    def refine(self, frame: ImageFrame, coarse: SoftMask) -> SoftMask:
        _check_pair(frame, coarse)
        if self._transport is None:
            self._connect()
        deadline = time.monotonic() + self._timeout
        crop = protocol.support_crop_hint(coarse.values)
        request = protocol.encode_request(
            coarse.frame_index, coarse.object_id, frame.rgb, coarse.values, crop)
        self._transport.send(request, deadline)

        (length,) = struct.unpack("<I", self._transport.read_exactly(4, deadline))
        expected = 4 + frame.height * frame.width
        if length != expected:
            body = self._transport.read_exactly(min(length, 4), deadline) \
                if length else b""
            self.close()
            raise ProtocolError(
                f"response length {length}, expected {expected}"
                + (" (server signalled an error)" if _is_error_frame(body) else ""))
        body = self._transport.read_exactly(length, deadline)
        frame_index, values = protocol.decode_response_body(
            body, frame.height, frame.width)
        if frame_index != coarse.frame_index:
            self.close()
            raise ProtocolError(
                f"response is for frame {frame_index}, asked about "
                f"{coarse.frame_index}")
        return SoftMask(coarse.frame_index, coarse.object_id,
                        np.clip(values, 0.0, 1.0))

    def close(self) -> None:
        if self._transport is not None:
            self._transport.close()
            self._transport = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def _is_error_frame(body: bytes) -> bool:
    return len(body) == 4 and struct.unpack("<I", body)[0] == 0xFFFFFFFF
