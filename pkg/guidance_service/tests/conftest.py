"""Fixtures driving the contract suite over two transports.

"direct" exercises the ASGI app in process; "remote" runs a real uvicorn
server on an ephemeral port and talks to it through the avatar engine's
RemoteGuidance client, so the same assertions cover both sides of the
wire.
"""

import threading
import time

import pytest
import uvicorn
from fastapi.testclient import TestClient

from guidance_service import ServiceConfig, create_app
from splatavatar.distillation import RemoteGuidance

from contract_helpers import DirectClient


@pytest.fixture()
def raw():
    return TestClient(create_app(ServiceConfig()))


@pytest.fixture(scope="session")
def live_url():
    server = uvicorn.Server(uvicorn.Config(
        create_app(ServiceConfig()), host="127.0.0.1", port=0,
        log_level="warning"))
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.monotonic() + 10.0
    while not server.started:
        if time.monotonic() > deadline:
            raise RuntimeError("uvicorn did not start")
        time.sleep(0.01)
    port = server.servers[0].sockets[0].getsockname()[1]
    yield f"http://127.0.0.1:{port}"
    server.should_exit = True
    thread.join(timeout=5.0)


@pytest.fixture(params=["direct", "remote"])
def client(request, live_url):
    if request.param == "direct":
        return DirectClient(create_app(ServiceConfig()))
    return RemoteGuidance(live_url, timeout=10.0, retries=1)
