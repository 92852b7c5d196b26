"""Wire format of the mask-refinement service.

All integers are little-endian. A connection opens with a handshake: the
client sends "STMR" followed by a u32 protocol version, the server answers
"OKRF" followed by its version. Each refinement request is one
length-prefixed message:

  u32 msg_len      bytes that follow this field
  u32 frame_index
  u32 object_id
  u32 width
  u32 height
  i32 crop_x       advisory working region; may extend past the frame
  i32 crop_y
  u32 crop_w
  u32 crop_h
  width*height*3   RGB bytes, row-major
  width*height     coarse mask bytes, each byte = round(255 * value)

The response is:

  u32 msg_len      bytes that follow (4 + width*height)
  u32 frame_index  echo of the request
  width*height     refined mask bytes

A server that cannot parse a request sends an error frame, a message of
length 4 whose payload is u32 0xFFFFFFFF, and closes the connection.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"STMR"
ACK = b"OKRF"
VERSION = 1
ERROR_SENTINEL = 0xFFFFFFFF
# Caps the length prefix so a corrupt header cannot demand a huge buffer.
MAX_MESSAGE = 1 << 26

_HEADER = struct.Struct("<IIIIiiII")


class WireError(Exception):
    """Bytes that do not follow the framing rules."""


def quantize(values: np.ndarray) -> bytes:
    """Mask values in [0, 1] to bytes, rounding half up."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise WireError("mask values must lie in [0, 1]")
    return np.floor(arr * 255.0 + 0.5).astype(np.uint8).tobytes()


def dequantize(payload: bytes, height: int, width: int) -> np.ndarray:
    """Mask bytes back to values in [0, 1]."""
    if len(payload) != height * width:
        raise WireError(
            f"mask payload is {len(payload)} bytes, expected {height * width}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return arr.astype(np.float64) / 255.0


def handshake_reply(client_hello: bytes) -> bytes:
    """Validate the 8-byte hello, return the 8-byte acknowledgement."""
    if len(client_hello) != 8:
        raise WireError(f"handshake must be 8 bytes, got {len(client_hello)}")
    if client_hello[:4] != MAGIC:
        raise WireError(f"bad handshake magic {client_hello[:4]!r}")
    (version,) = struct.unpack("<I", client_hello[4:])
    if version != VERSION:
        raise WireError(
            f"client speaks version {version}, this server speaks {VERSION}")
    return ACK + struct.pack("<I", VERSION)


@dataclass(frozen=True)
class Request:
    """One parsed refinement request.

    mask_bytes keeps the raw quantized payload so an echo reply can return
    it verbatim; mask exposes the dequantized values.
    """

    frame_index: int
    object_id: int
    width: int
    height: int
    crop: tuple[int, int, int, int]
    rgb: np.ndarray
    mask_bytes: bytes

    @property
    def mask(self) -> np.ndarray:
        return dequantize(self.mask_bytes, self.height, self.width)


def parse_request(body: bytes) -> Request:
    """Parse a request body (everything after msg_len)."""
    if len(body) < _HEADER.size:
        raise WireError(f"request body too short: {len(body)} bytes")
    frame_index, object_id, w, h, cx, cy, cw, ch = _HEADER.unpack(
        body[:_HEADER.size])
    expected = _HEADER.size + h * w * 3 + h * w
    if len(body) != expected:
        raise WireError(
            f"request body is {len(body)} bytes, header implies {expected}")
    rgb_end = _HEADER.size + h * w * 3
    rgb = np.frombuffer(body[_HEADER.size:rgb_end],
                        dtype=np.uint8).reshape(h, w, 3)
    return Request(frame_index, object_id, w, h, (cx, cy, cw, ch), rgb,
                   body[rgb_end:])


def build_request(frame_index: int, object_id: int, rgb: np.ndarray,
                  mask_values: np.ndarray,
                  crop: tuple[int, int, int, int]) -> bytes:
    """Pack one request, msg_len prefix included; used by tests and tools."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise WireError(f"rgb must be uint8 (h, w, 3), got {rgb.dtype} {rgb.shape}")
    h, w = rgb.shape[:2]
    mask_values = np.asarray(mask_values)
    if mask_values.shape != (h, w):
        raise WireError(
            f"mask shape {mask_values.shape} does not match frame {h}x{w}")
    crop_x, crop_y, crop_w, crop_h = crop
    header = _HEADER.pack(frame_index, object_id, w, h,
                          crop_x, crop_y, crop_w, crop_h)
    body = header + rgb.tobytes() + quantize(mask_values)
    return struct.pack("<I", len(body)) + body


def build_response(frame_index: int, mask_bytes: bytes) -> bytes:
    """Pack one response, msg_len prefix included."""
    body = struct.pack("<I", frame_index) + mask_bytes
    return struct.pack("<I", len(body)) + body


def parse_response(body: bytes, height: int, width: int) -> tuple[int, np.ndarray]:
    """Parse a response body; returns (frame_index, mask values)."""
    if len(body) != 4 + height * width:
        raise WireError(
            f"response body is {len(body)} bytes, expected {4 + height * width}")
    (frame_index,) = struct.unpack("<I", body[:4])
    return frame_index, dequantize(body[4:], height, width)


def error_frame() -> bytes:
    return struct.pack("<I", 4) + struct.pack("<I", ERROR_SENTINEL)
