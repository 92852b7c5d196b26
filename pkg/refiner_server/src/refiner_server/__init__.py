"""Mask-refinement service speaking a length-prefixed binary protocol.

Two serving modes: echo, which returns every request mask verbatim and
exists to validate protocol plumbing, and model, a small convolutional
refiner fitted to a sequence's first annotated frame.
"""

from .model import MaskRefinerNet, load_model, make_input, refine_mask, save_model
from .server import ModelHandler, TcpServer, echo_handler, serve_stdio, serve_stream
from .training import deform_mask, finetune, finetune_to_file
from .wire import (
    ACK,
    ERROR_SENTINEL,
    MAGIC,
    VERSION,
    Request,
    WireError,
    build_request,
    build_response,
    dequantize,
    error_frame,
    handshake_reply,
    parse_request,
    parse_response,
    quantize,
)

__version__ = "0.1.0"

__all__ = [
    "ACK",
    "ERROR_SENTINEL",
    "MAGIC",
    "MaskRefinerNet",
    "ModelHandler",
    "Request",
    "TcpServer",
    "VERSION",
    "WireError",
    "build_request",
    "build_response",
    "deform_mask",
    "dequantize",
    "echo_handler",
    "error_frame",
    "finetune",
    "finetune_to_file",
    "handshake_reply",
    "load_model",
    "make_input",
    "parse_request",
    "parse_response",
    "quantize",
    "refine_mask",
    "save_model",
    "serve_stdio",
    "serve_stream",
]
