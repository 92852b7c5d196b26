"""Command line entry points.

  refiner-server serve --mode echo --listen 127.0.0.1:9000
  refiner-server serve --mode model --model net.pt --listen stdio
  refiner-server finetune --frame f0.png --mask m0.png --out net.pt

In stdio mode the wire owns stdout, so status lines go to stderr.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .server import ModelHandler, TcpServer, echo_handler, serve_stdio
from .training import finetune_to_file


def _load_array(path: str) -> np.ndarray:
    """Read an image file or a .npy array."""
    p = Path(path)
    if p.suffix == ".npy":
        return np.load(p)
    from PIL import Image  # lazy: only image files need it
    return np.asarray(Image.open(p))


def _load_frame(path: str) -> np.ndarray:
    arr = _load_array(path)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    if arr.ndim != 3 or arr.shape[2] < 3:
        raise SystemExit(f"{path}: expected an RGB image, got shape {arr.shape}")
    return np.ascontiguousarray(arr[:, :, :3], dtype=np.uint8)


def _load_mask(path: str) -> np.ndarray:
    arr = _load_array(path)
    if arr.ndim == 3:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise SystemExit(f"{path}: expected a 2-d mask, got shape {arr.shape}")
    if arr.dtype.kind == "f":
        return (np.asarray(arr, dtype=np.float64) > 0.5).astype(np.float32)
    return (arr > (127 if arr.max() > 1 else 0)).astype(np.float32)


def _cmd_serve(args) -> int:
    if args.mode == "model":
        if not args.model:
            raise SystemExit("--mode model needs --model PATH")
        handler = ModelHandler.from_file(args.model)
    else:
        handler = echo_handler
    if args.listen == "stdio":
        serve_stdio(handler)
        return 0
    host, sep, port_text = args.listen.rpartition(":")
    if not sep or not host:
        raise SystemExit(f"--listen must be HOST:PORT or stdio, got {args.listen!r}")
    try:
        port = int(port_text)
    except ValueError:
        raise SystemExit(f"bad port in {args.listen!r}") from None
    server = TcpServer(handler, host=host, port=port)
    print(f"listening on {server.host}:{server.port}", file=sys.stderr, flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.close()
    return 0


def _cmd_finetune(args) -> int:
    frame = _load_frame(args.frame)
    mask = _load_mask(args.mask)
    losses = finetune_to_file(args.out, frame, mask, steps=args.steps,
                              seed=args.seed, hidden=args.hidden, lr=args.lr)
    if losses:
        print(f"{len(losses)} steps, loss {losses[0]:.4f} -> {losses[-1]:.4f}",
              file=sys.stderr)
    else:
        print("wrote untrained (seeded) model", file=sys.stderr)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="refiner-server")
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="answer refinement requests")
    serve.add_argument("--mode", choices=("echo", "model"), default="echo")
    serve.add_argument("--listen", default="stdio",
                       help="HOST:PORT for a socket listener, or stdio")
    serve.add_argument("--model", help="model file for --mode model")
    serve.set_defaults(func=_cmd_serve)

    finetune = sub.add_parser("finetune", help="fit a model to one frame")
    finetune.add_argument("--frame", required=True, help="RGB image or .npy")
    finetune.add_argument("--mask", required=True, help="reference mask image or .npy")
    finetune.add_argument("--out", required=True, help="model file to write")
    finetune.add_argument("--steps", type=int, default=150)
    finetune.add_argument("--seed", type=int, default=0)
    finetune.add_argument("--hidden", type=int, default=16)
    finetune.add_argument("--lr", type=float, default=0.05)
    finetune.set_defaults(func=_cmd_finetune)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
