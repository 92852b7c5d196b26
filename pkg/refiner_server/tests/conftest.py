"""Shared fixtures."""

from __future__ import annotations

import pytest

from refiner_server import TcpServer, echo_handler


@pytest.fixture
def echo_server():
    with TcpServer(echo_handler).start() as server:
        yield server
