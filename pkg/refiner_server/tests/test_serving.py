"""Connection behavior over real sockets and stdio."""

from __future__ import annotations

import struct
import subprocess
import sys
import threading

import numpy as np
import pytest

from refiner_server import (
    MAGIC,
    ModelHandler,
    TcpServer,
    build_request,
    error_frame,
    finetune,
    parse_response,
    quantize,
    save_model,
)

from wireclient import closed_cleanly, connect, recv_exactly, recv_message


def _random_request(rng, frame_index=0):
    h = int(rng.integers(2, 10))
    w = int(rng.integers(2, 10))
    rgb = rng.integers(0, 256, size=(h, w, 3)).astype(np.uint8)
    mask = rng.integers(0, 256, size=(h, w)).astype(np.float64) / 255.0
    return build_request(frame_index, 1, rgb, mask, (0, 0, w, h)), mask, (h, w)


def test_echo_returns_request_mask_verbatim(echo_server):
    rng = np.random.default_rng(0)
    sock = connect(echo_server.port)
    try:
        msg, mask, (h, w) = _random_request(rng, frame_index=5)
        sock.sendall(msg)
        body = recv_message(sock)
        frame, values = parse_response(body, h, w)
        assert frame == 5
        assert body[4:] == quantize(mask)
        assert np.array_equal(values, mask)
    finally:
        sock.close()


def test_one_connection_serves_many_requests(echo_server):
    rng = np.random.default_rng(1)
    sock = connect(echo_server.port)
    try:
        for i in range(7):
            msg, mask, (h, w) = _random_request(rng, frame_index=i)
            sock.sendall(msg)
            frame, values = parse_response(recv_message(sock), h, w)
            assert frame == i
            assert np.array_equal(values, mask)
    finally:
        sock.close()


def test_concurrent_connections_each_get_answers(echo_server):
    errors = []

    def client(seed):
        try:
            rng = np.random.default_rng(seed)
            sock = connect(echo_server.port)
            try:
                for i in range(5):
                    msg, mask, (h, w) = _random_request(rng, frame_index=i)
                    sock.sendall(msg)
                    _, values = parse_response(recv_message(sock), h, w)
                    assert np.array_equal(values, mask)
            finally:
                sock.close()
        except Exception as exc:  # collected, re-raised on the main thread
            errors.append(exc)

    threads = [threading.Thread(target=client, args=(s,)) for s in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout=30)
    assert errors == []


def test_version_mismatch_is_rejected_without_ack(echo_server):
    sock = connect(echo_server.port, handshake=False)
    try:
        sock.sendall(MAGIC + struct.pack("<I", 2))
        assert closed_cleanly(sock)
    finally:
        sock.close()


def test_wrong_magic_is_rejected_without_ack(echo_server):
    sock = connect(echo_server.port, handshake=False)
    try:
        sock.sendall(b"JUNK" + struct.pack("<I", 1))
        assert closed_cleanly(sock)
    finally:
        sock.close()


def test_malformed_request_gets_error_frame_then_close(echo_server):
    sock = connect(echo_server.port)
    try:
        # length says 10 but the body cannot be a request
        sock.sendall(struct.pack("<I", 10) + b"\x00" * 10)
        assert recv_exactly(sock, 8) == error_frame()
        assert closed_cleanly(sock)
    finally:
        sock.close()


def test_unreasonable_length_gets_error_frame_then_close(echo_server):
    sock = connect(echo_server.port)
    try:
        sock.sendall(struct.pack("<I", 0xFFFFFFF0))
        assert recv_exactly(sock, 8) == error_frame()
        assert closed_cleanly(sock)
    finally:
        sock.close()


def test_model_mode_answers_with_values_in_range(tmp_path):
    rng = np.random.default_rng(3)
    rgb0 = rng.integers(0, 256, size=(12, 12, 3)).astype(np.uint8)
    ref = np.zeros((12, 12), dtype=np.float32)
    ref[3:9, 3:9] = 1.0
    model, _ = finetune(rgb0, ref, steps=5, seed=0, hidden=4)
    path = tmp_path / "net.pt"
    save_model(path, model)

    with TcpServer(ModelHandler.from_file(path)).start() as server:
        sock = connect(server.port)
        try:
            msg, _, (h, w) = _random_request(rng, frame_index=2)
            sock.sendall(msg)
            frame, values = parse_response(recv_message(sock), h, w)
            assert frame == 2
            assert values.min() >= 0.0
            assert values.max() <= 1.0
        finally:
            sock.close()


def test_stdio_mode_round_trips():
    rng = np.random.default_rng(4)
    msg, mask, (h, w) = _random_request(rng, frame_index=9)
    hello = MAGIC + struct.pack("<I", 1)
    proc = subprocess.run(
        [sys.executable, "-m", "refiner_server.cli",
         "serve", "--mode", "echo", "--listen", "stdio"],
        input=hello + msg, capture_output=True, timeout=60)
    out = proc.stdout
    assert out[:8] == b"OKRF\x01\x00\x00\x00"
    (length,) = struct.unpack("<I", out[8:12])
    frame, values = parse_response(out[12:12 + length], h, w)
    assert frame == 9
    assert np.array_equal(values, mask)
