"""Long-running refinement service.

A connection is handshaken once, then serves length-prefixed requests one
at a time until the peer closes. Malformed bytes get an error frame and
the connection is closed; a handshake from the wrong protocol version is
rejected by closing without an acknowledgement. The TCP listener accepts
any number of concurrent connections, each on its own thread; stdio mode
serves exactly one connection over stdin/stdout.
"""

from __future__ import annotations

import socket
import struct
import sys
import threading

from . import wire
from .model import load_model, refine_mask


def echo_handler(request: wire.Request) -> bytes:
    """Returns the request mask verbatim."""
    return request.mask_bytes


class ModelHandler:
    """Refines through a loaded network; sigmoid keeps outputs in [0, 1]."""

    def __init__(self, model):
        self._model = model
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path) -> "ModelHandler":
        return cls(load_model(path))

    def __call__(self, request: wire.Request) -> bytes:
        with self._lock:
            values = refine_mask(self._model, request.rgb, request.mask)
        return wire.quantize(values)


def _read_exactly(read, n: int):
    """Collect exactly n bytes; None on clean end-of-stream at byte 0."""
    chunks = []
    got = 0
    while got < n:
        chunk = read(n - got)
        if not chunk:
            if got == 0:
                return None
            raise wire.WireError(f"stream ended {n - got} bytes early")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def serve_stream(read, write, handler) -> None:
    """Drive one connection: handshake, then request/response until EOF."""
    try:
        hello = _read_exactly(read, 8)
    except wire.WireError:
        return  # truncated hello: nothing sensible to answer
    if hello is None:
        return
    try:
        write(wire.handshake_reply(hello))
    except wire.WireError:
        return  # rejected: close without acknowledging
    while True:
        try:
            head = _read_exactly(read, 4)
            if head is None:
                return
            (length,) = struct.unpack("<I", head)
            if length == 0 or length > wire.MAX_MESSAGE:
                raise wire.WireError(f"unreasonable message length {length}")
            body = _read_exactly(read, length)
            if body is None:
                return
            request = wire.parse_request(body)
        except wire.WireError:
            write(wire.error_frame())
            return
        write(wire.build_response(request.frame_index, handler(request)))


def _serve_socket(conn: socket.socket, handler) -> None:
    try:
        serve_stream(conn.recv, conn.sendall, handler)
    except OSError:
        pass
    finally:
        try:
            conn.close()
        except OSError:
            pass


class TcpServer:
    """Threaded listener; every accepted connection gets its own thread."""

    def __init__(self, handler, host: str = "127.0.0.1", port: int = 0):
        self._handler = handler
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen()
        self.host, self.port = self._listener.getsockname()
        self._accept_thread = None
        self._closing = False

    def serve_forever(self) -> None:
        while True:
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return  # listener closed
            thread = threading.Thread(target=_serve_socket,
                                      args=(conn, self._handler), daemon=True)
            thread.start()

    def start(self) -> "TcpServer":
        self._accept_thread = threading.Thread(target=self.serve_forever,
                                               daemon=True)
        self._accept_thread.start()
        return self

    def close(self) -> None:
        self._closing = True
        try:
            self._listener.close()
        except OSError:
            pass
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def serve_stdio(handler) -> None:
    """Serve a single connection over this process's stdin/stdout."""
    stdin = sys.stdin.buffer
    stdout = sys.stdout.buffer

    def write(payload: bytes) -> None:
        stdout.write(payload)
        stdout.flush()

    serve_stream(stdin.read1 if hasattr(stdin, "read1") else stdin.read,
                 write, handler)
