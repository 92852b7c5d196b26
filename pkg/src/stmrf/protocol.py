"""Byte framing for the external mask-refinement wire protocol.

All integers are little-endian. A connection opens with a handshake:

  client -> "STMR" + u32 version
  server -> "OKRF" + u32 version

Each refinement request is one length-prefixed message:

  u32 msg_len      bytes that follow this field
  u32 frame_index
  u32 object_id
  u32 width
  u32 height
  i32 crop_x       suggested working region; servers may ignore it and
  i32 crop_y       coordinates may extend past the frame when inflation
  u32 crop_w       crosses the border
  u32 crop_h
  width*height*3   RGB bytes, row-major
  width*height     mask bytes, round(255 * value)

The response is:

  u32 msg_len      bytes that follow (4 + width*height)
  u32 frame_index  echo of the request
  width*height     refined mask bytes

This module only packs and parses bytes; transports live with the client.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ProtocolError, ValidationError

MAGIC = b"STMR"
ACK = b"OKRF"
VERSION = 1
HEADER_FIELDS = struct.Struct("<IIIIiiII")  # after msg_len


def mask_to_bytes(values: np.ndarray) -> bytes:
    """Quantize mask values in [0, 1] to bytes (round half up)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValidationError("mask values must lie in [0, 1]")
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8).tobytes()


def bytes_to_mask(payload: bytes, height: int, width: int) -> np.ndarray:
    """Dequantize mask bytes back to values in [0, 1]."""
    if len(payload) != height * width:
        raise ProtocolError(
            f"mask payload has {len(payload)} bytes, expected {height * width}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return np.clip(arr.astype(np.float64) / 255.0, 0.0, 1.0)


def encode_handshake() -> bytes:
    return MAGIC + struct.pack("<I", VERSION)


def decode_handshake_reply(payload: bytes) -> int:
    """Validate the server's handshake reply; return its version."""
    if len(payload) != 8:
        raise ProtocolError(f"handshake reply must be 8 bytes, got {len(payload)}")
    if payload[:4] != ACK:
        raise ProtocolError(f"bad handshake magic {payload[:4]!r}")
    (version,) = struct.unpack("<I", payload[4:])
    if version != VERSION:
        raise ProtocolError(f"server speaks version {version}, need {VERSION}")
    return version


def encode_request(frame_index: int, object_id: int, rgb: np.ndarray,
                   mask_values: np.ndarray,
                   crop: tuple[int, int, int, int]) -> bytes:
    """Pack one refinement request, msg_len prefix included."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValidationError(f"rgb must be uint8 (h, w, 3), got {rgb.dtype} {rgb.shape}")
    h, w = rgb.shape[:2]
    mask_values = np.asarray(mask_values)
    if mask_values.shape != (h, w):
        raise ValidationError(
            f"mask shape {mask_values.shape} does not match frame {h}x{w}")
    crop_x, crop_y, crop_w, crop_h = crop
    header = HEADER_FIELDS.pack(frame_index, object_id, w, h,
                                crop_x, crop_y, crop_w, crop_h)
    body = header + rgb.tobytes() + mask_to_bytes(mask_values)
    return struct.pack("<I", len(body)) + body


@dataclass(frozen=True)
class Request:
    frame_index: int
    object_id: int
    width: int
    height: int
    crop: tuple[int, int, int, int]
    rgb: np.ndarray
    mask: np.ndarray


def decode_request(body: bytes) -> Request:
    """Parse a request body (everything after msg_len); used by tests."""
    if len(body) < HEADER_FIELDS.size:
        raise ProtocolError(f"request body too short: {len(body)} bytes")
    frame_index, object_id, w, h, cx, cy, cw, ch = HEADER_FIELDS.unpack(
        body[:HEADER_FIELDS.size])
    expected = HEADER_FIELDS.size + h * w * 3 + h * w
    if len(body) != expected:
        raise ProtocolError(
            f"request body is {len(body)} bytes, header implies {expected}")
    rgb_end = HEADER_FIELDS.size + h * w * 3
    rgb = np.frombuffer(body[HEADER_FIELDS.size:rgb_end],
                        dtype=np.uint8).reshape(h, w, 3)
    mask = bytes_to_mask(body[rgb_end:], h, w)
    return Request(frame_index, object_id, w, h, (cx, cy, cw, ch), rgb, mask)


def encode_response(frame_index: int, mask_values: np.ndarray) -> bytes:
    """Pack one response, msg_len prefix included."""
    body = struct.pack("<I", frame_index) + mask_to_bytes(mask_values)
    return struct.pack("<I", len(body)) + body


def decode_response_body(body: bytes, height: int, width: int) -> tuple[int, np.ndarray]:
    """Parse a response body; returns (frame_index, mask values)."""
    if len(body) != 4 + height * width:
        raise ProtocolError(
            f"response body is {len(body)} bytes, expected {4 + height * width}")
    (frame_index,) = struct.unpack("<I", body[:4])
    return frame_index, bytes_to_mask(body[4:], height, width)


def support_crop_hint(mask_values: np.ndarray,
                      inflate: float = 0.5) -> tuple[int, int, int, int]:
    """Bounding box of the mask support, inflated; full frame when empty.

    The box grows by `inflate` of its own size (half per side). Coordinates
    may leave the frame; servers treat the hint as advisory.
    """
    arr = np.asarray(mask_values)
    h, w = arr.shape
    rows, cols = np.nonzero(arr > 0)
    if rows.size == 0:
        return (0, 0, w, h)
    r0, r1 = int(rows.min()), int(rows.max()) + 1
    c0, c1 = int(cols.min()), int(cols.max()) + 1
    bh, bw = r1 - r0, c1 - c0
    # Half the growth per side, rounded half up to stay integer.
    pad_r = int(math.floor(bh * inflate / 2.0 + 0.5))
    pad_c = int(math.floor(bw * inflate / 2.0 + 0.5))
    return (c0 - pad_c, r0 - pad_r, bw + 2 * pad_c, bh + 2 * pad_r)
