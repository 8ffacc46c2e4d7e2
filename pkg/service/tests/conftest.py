import socket
import threading
import time

import pytest
import uvicorn

from prior_service.app import create_app
from prior_service.config import ServiceConfig


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class LiveServer:
    """uvicorn in a background thread, torn down at fixture exit."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        self.url = f"http://{config.host}:{config.port}"
        uv_config = uvicorn.Config(create_app(config), host=config.host,
                                   port=config.port, log_level="warning")
        self.server = uvicorn.Server(uv_config)
        self.thread = threading.Thread(target=self.server.run, daemon=True)

    def start(self):
        self.thread.start()
        deadline = time.time() + 15
        import requests

        while time.time() < deadline:
            try:
                requests.get(f"{self.url}/v1/health", timeout=1)
                return self
            except requests.RequestException:
                time.sleep(0.05)
        raise RuntimeError("service did not come up")

    def stop(self):
        self.server.should_exit = True
        self.thread.join(timeout=10)


@pytest.fixture(scope="session")
def live_server():
    server = LiveServer(ServiceConfig(port=free_port(), backend="mock:silhouette"))
    server.start()
    yield server
    server.stop()


@pytest.fixture(scope="session")
def live_oracle_server():
    server = LiveServer(ServiceConfig(port=free_port(), backend="mock:oracle"))
    server.start()
    yield server
    server.stop()
