from __future__ import annotations

import socketserver
import struct
import sys
import threading

import numpy as np
import pytest

from stmrf import (
    ExemplarRefiner,
    ExternalRefiner,
    IdentityRefiner,
    ImageFrame,
    LabelField,
    OracleRefiner,
    SoftMask,
    build_exemplar_model,
    exemplar_refine,
)
from stmrf.errors import (
    ConfigurationError,
    DimensionError,
    ProtocolError,
    RefinementError,
    ValidationError,
)

OBJ_COLOR = (200, 60, 60)
BG_COLOR = (16, 16, 16)


def _flat_frame(index, h, w, color=BG_COLOR):
    rgb = np.zeros((h, w, 3), dtype=np.uint8)
    rgb[:] = color
    return rgb


def _block_scene(h=24, w=24):
    """Frame with an 8x8 colored block at rows/cols 4..11 on a dark ground."""
    rgb = _flat_frame(0, h, w)
    rgb[4:12, 4:12] = OBJ_COLOR
    truth = np.zeros((h, w), dtype=np.uint8)
    truth[4:12, 4:12] = 1
    return ImageFrame(0, rgb), truth


def test_identity_refiner_returns_input():
    frame, truth = _block_scene()
    mask = SoftMask(0, 1, truth.astype(np.float64) * 0.8)
    out = IdentityRefiner().refine(frame, mask)
    assert out is mask


def test_identity_refiner_checks_geometry():
    frame, truth = _block_scene()
    with pytest.raises(DimensionError):
        IdentityRefiner().refine(frame, SoftMask(0, 1, np.zeros((5, 5))))
    with pytest.raises(ValidationError):
        IdentityRefiner().refine(frame, SoftMask(3, 1, truth.astype(np.float64)))


def test_oracle_refiner_returns_reference():
    frame, truth = _block_scene()
    ref = LabelField(0, 2, truth)
    refiner = OracleRefiner.from_masks([ref])
    out = refiner.refine(frame, SoftMask(0, 2, np.zeros((24, 24))))
    assert np.array_equal(out.values, truth.astype(np.float64))
    with pytest.raises(ConfigurationError):
        refiner.refine(frame, SoftMask(0, 5, np.zeros((24, 24))))


def test_exemplar_model_single_bin_is_area_fraction():
    frame, truth = _block_scene()
    model = build_exemplar_model(frame, LabelField(0, 1, truth), bins_per_channel=1)
    assert model.posterior.shape == (1,)
    assert abs(model.posterior[0] - 64 / 576) < 1e-12
    pm = model.posterior_map(frame.rgb)
    assert np.allclose(pm, 64 / 576)


def test_exemplar_model_hand_posterior():
    # 8x8 frame, 3x3 block: n_fg=9, n_bg=55, 16^3 bins
    rgb = _flat_frame(0, 8, 8)
    rgb[2:5, 2:5] = OBJ_COLOR
    truth = np.zeros((8, 8), dtype=np.uint8)
    truth[2:5, 2:5] = 1
    model = build_exemplar_model(ImageFrame(0, rgb), LabelField(0, 1, truth))
    pm = model.posterior_map(rgb)
    n_bins = 16 ** 3
    like_fg = 10.0 / (9 + n_bins)
    like_bg = 1.0 / (55 + n_bins)
    prior = 9 / 64
    want_obj = like_fg * prior / (like_fg * prior + like_bg * (1 - prior))
    assert abs(pm[3, 3] - want_obj) < 1e-12
    like_fg_bg = 1.0 / (9 + n_bins)
    like_bg_bg = 56.0 / (55 + n_bins)
    want_bg = like_fg_bg * prior / (like_fg_bg * prior + like_bg_bg * (1 - prior))
    assert abs(pm[0, 0] - want_bg) < 1e-12
    assert want_obj > 0.5 > want_bg


def test_exemplar_model_validation():
    frame, truth = _block_scene()
    with pytest.raises(ValidationError):
        build_exemplar_model(frame, LabelField(0, 1, truth), bins_per_channel=3)
    with pytest.raises(ValidationError):
        build_exemplar_model(frame, LabelField(0, 1, np.zeros((24, 24), np.uint8)))


def test_exemplar_refine_recovers_block_from_noisy_mask():
    frame, truth = _block_scene()
    model = build_exemplar_model(frame, LabelField(0, 1, truth))
    coarse = truth.astype(np.float64).copy()
    coarse[6:8, 6:8] = 0.0  # hole in the support
    coarse[1, 1] = 1.0      # salt on the ground
    out = exemplar_refine(model, frame, SoftMask(0, 1, coarse))
    assert np.array_equal(out.values, truth.astype(np.float64))


def test_exemplar_refine_drops_distant_decoy():
    # model fit on a clean frame; a same-colored decoy shows up later,
    # farther away than the spatial prior reaches
    frame, truth = _block_scene()
    model = build_exemplar_model(frame, LabelField(0, 1, truth))
    rgb = frame.rgb.copy()
    rgb[16:22, 16:22] = OBJ_COLOR
    later = ImageFrame(1, rgb)
    out = exemplar_refine(model, later, SoftMask(1, 1, truth.astype(np.float64)))
    assert np.array_equal(out.values, truth.astype(np.float64))


def test_exemplar_refine_drops_component_not_touching_support():
    frame, truth = _block_scene()
    rgb = frame.rgb.copy()
    rgb[4:12, 14:16] = OBJ_COLOR  # object-colored, 2px from block, disconnected
    frame2 = ImageFrame(0, rgb)
    model = build_exemplar_model(frame2, LabelField(0, 1, truth))
    out = exemplar_refine(model, frame2, SoftMask(0, 1, truth.astype(np.float64)))
    assert np.array_equal(out.values, truth.astype(np.float64))


def test_exemplar_refine_fills_enclosed_hole():
    h = w = 24
    rgb = _flat_frame(0, h, w)
    rgb[4:12, 4:12] = OBJ_COLOR
    rgb[7:9, 7:9] = BG_COLOR  # ground-colored pocket inside the object
    truth = np.zeros((h, w), dtype=np.uint8)
    truth[4:12, 4:12] = 1
    frame = ImageFrame(0, rgb)
    model = build_exemplar_model(frame, LabelField(0, 1, truth))
    out = exemplar_refine(model, frame, SoftMask(0, 1, truth.astype(np.float64)))
    assert np.array_equal(out.values, truth.astype(np.float64))


def test_exemplar_refine_output_is_hard():
    frame, truth = _block_scene()
    model = build_exemplar_model(frame, LabelField(0, 1, truth))
    out = exemplar_refine(model, frame, SoftMask(0, 1, truth * 0.7))
    assert set(np.unique(out.values)) <= {0.0, 1.0}


def test_exemplar_refine_empty_support_is_empty():
    frame, truth = _block_scene()
    model = build_exemplar_model(frame, LabelField(0, 1, truth))
    out = exemplar_refine(model, frame, SoftMask(0, 1, np.zeros((24, 24))))
    assert not out.values.any()


def test_exemplar_refiner_keys_models_by_object():
    frame, truth = _block_scene()
    refiner = ExemplarRefiner.from_first_frame(frame, [LabelField(0, 3, truth)])
    out = refiner.refine(frame, SoftMask(0, 3, truth.astype(np.float64)))
    assert np.array_equal(out.values, truth.astype(np.float64))
    with pytest.raises(ConfigurationError):
        refiner.refine(frame, SoftMask(0, 4, truth.astype(np.float64)))
    with pytest.raises(ConfigurationError):
        ExemplarRefiner.from_first_frame(frame, [])


SERVER_SCRIPT = r'''
import struct, sys, time

def read_exactly(n):
    buf = b""
    while len(buf) < n:
        chunk = sys.stdin.buffer.read(n - len(buf))
        if not chunk:
            sys.exit(0)
        buf += chunk
    return buf

mode = sys.argv[1] if len(sys.argv) > 1 else "echo"
hs = read_exactly(8)
assert hs[:4] == b"STMR"
if mode == "badshake":
    sys.stdout.buffer.write(b"XXXX" + hs[4:])
    sys.stdout.buffer.flush()
    sys.exit(0)
sys.stdout.buffer.write(b"OKRF" + hs[4:])
sys.stdout.buffer.flush()
while True:
    (length,) = struct.unpack("<I", read_exactly(4))
    body = read_exactly(length)
    if mode == "hang":
        time.sleep(60)
    frame, obj, w, h = struct.unpack("<IIII", body[:16])
    if mode == "error":
        reply = struct.pack("<I", 0xFFFFFFFF)
    elif mode == "wrongframe":
        reply = struct.pack("<I", frame + 1) + body[32 + h * w * 3:]
    else:
        reply = struct.pack("<I", frame) + body[32 + h * w * 3:]
    sys.stdout.buffer.write(struct.pack("<I", len(reply)) + reply)
    sys.stdout.buffer.flush()
'''


@pytest.fixture
def server_path(tmp_path):
    path = tmp_path / "refine_server.py"
    path.write_text(SERVER_SCRIPT)
    return path


def _stdio_endpoint(server_path, mode):
    return f"stdio:{sys.executable} {server_path} {mode}"


def test_external_refiner_stdio_echo(server_path):
    frame, truth = _block_scene()
    coarse = SoftMask(0, 1, truth.astype(np.float64))
    with ExternalRefiner(_stdio_endpoint(server_path, "echo"), timeout=10) as ref:
        out = ref.refine(frame, coarse)
        assert np.array_equal(out.values, coarse.values)
        out2 = ref.refine(ImageFrame(5, frame.rgb),
                          SoftMask(5, 1, truth * 0.5))
        assert np.abs(out2.values - truth * 0.5).max() <= 0.5 / 255 + 1e-12


def test_external_refiner_error_frame(server_path):
    frame, truth = _block_scene()
    with ExternalRefiner(_stdio_endpoint(server_path, "error"), timeout=10) as ref:
        with pytest.raises(RefinementError):
            ref.refine(frame, SoftMask(0, 1, truth.astype(np.float64)))


def test_external_refiner_wrong_frame_reply(server_path):
    frame, truth = _block_scene()
    with ExternalRefiner(_stdio_endpoint(server_path, "wrongframe"), timeout=10) as ref:
        with pytest.raises(ProtocolError):
            ref.refine(frame, SoftMask(0, 1, truth.astype(np.float64)))


def test_external_refiner_bad_handshake(server_path):
    frame, truth = _block_scene()
    with ExternalRefiner(_stdio_endpoint(server_path, "badshake"), timeout=10) as ref:
        with pytest.raises(ProtocolError):
            ref.refine(frame, SoftMask(0, 1, truth.astype(np.float64)))


def test_external_refiner_timeout(server_path):
    frame, truth = _block_scene()
    with ExternalRefiner(_stdio_endpoint(server_path, "hang"), timeout=0.75) as ref:
        with pytest.raises(RefinementError):
            ref.refine(frame, SoftMask(0, 1, truth.astype(np.float64)))


def test_external_refiner_rejects_bad_endpoint():
    with pytest.raises(ConfigurationError):
        ExternalRefiner("nonsense")._connect()
    with pytest.raises(ConfigurationError):
        ExternalRefiner("host:notaport")._connect()
    with pytest.raises(ValidationError):
        ExternalRefiner("localhost:1", timeout=0)


class _EchoHandler(socketserver.BaseRequestHandler):
    def _read_exactly(self, n):
        buf = b""
        while len(buf) < n:
            chunk = self.request.recv(n - len(buf))
            if not chunk:
                raise ConnectionError
            buf += chunk
        return buf

    def handle(self):
        hs = self._read_exactly(8)
        assert hs[:4] == b"STMR"
        self.request.sendall(b"OKRF" + hs[4:])
        try:
            while True:
                (length,) = struct.unpack("<I", self._read_exactly(4))
                body = self._read_exactly(length)
                frame, obj, w, h = struct.unpack("<IIII", body[:16])
                reply = struct.pack("<I", frame) + body[32 + h * w * 3:]
                self.request.sendall(struct.pack("<I", len(reply)) + reply)
        except ConnectionError:
            pass


def test_external_refiner_tcp_echo():
    server = socketserver.TCPServer(("127.0.0.1", 0), _EchoHandler)
    port = server.server_address[1]
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        frame, truth = _block_scene()
        coarse = SoftMask(0, 1, truth.astype(np.float64))
        with ExternalRefiner(f"127.0.0.1:{port}", timeout=10) as ref:
            out = ref.refine(frame, coarse)
            assert np.array_equal(out.values, coarse.values)
        with ExternalRefiner(f"tcp://127.0.0.1:{port}", timeout=10) as ref:
            out = ref.refine(frame, coarse)
            assert np.array_equal(out.values, coarse.values)
    finally:
        server.shutdown()
        server.server_close()


def test_external_refiner_connect_refused():
    # grab a free port and close it again so nothing listens there
    probe = socketserver.TCPServer(("127.0.0.1", 0), socketserver.BaseRequestHandler)
    port = probe.server_address[1]
    probe.server_close()
    ref = ExternalRefiner(f"127.0.0.1:{port}", timeout=1.0)
    frame, truth = _block_scene()
    with pytest.raises(RefinementError):
        ref.refine(frame, SoftMask(0, 1, truth.astype(np.float64)))
