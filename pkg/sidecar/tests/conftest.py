from __future__ import annotations

import socket
import threading
import time

import httpx
import pytest
import uvicorn

from uno_sidecar.service import create_app


def _free_port() -> int:
    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    port = sock.getsockname()[1]
    sock.close()
    return port


@pytest.fixture(scope="session")
def sidecar_url():
    """A live sidecar over a real socket, shared by the whole session."""
    port = _free_port()
    config = uvicorn.Config(
        create_app(seed=3), host="127.0.0.1", port=port, log_level="warning"
    )
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    url = f"http://127.0.0.1:{port}"
    for _ in range(200):
        try:
            httpx.get(f"{url}/health", timeout=1.0)
            break
        except httpx.TransportError:
            time.sleep(0.05)
    else:
        raise RuntimeError("sidecar did not start")
    yield url
    server.should_exit = True
    thread.join(timeout=10)
