"""HTTP adapter tests against a scriptable local stub server."""

from __future__ import annotations

import base64
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from rankrefine.backends.base import BackendEndpoint
from rankrefine.backends.http import (
    HttpEmbeddingProvider,
    HttpImageGenerator,
    HttpImageRefiner,
    HttpLayoutProvider,
    ProtocolError,
)
from rankrefine.backends.template import TEMPLATE_VERSION
from rankrefine.errors import EmbedderFailed, GeneratorUnavailable, LayoutPhaseFailed
from rankrefine.imaging import Image, to_png_bytes
from rankrefine.layout import BBox, Layout, ObjectSpec


def tiny_png_b64() -> str:
    image = Image(pixels=np.full((8, 8, 3), 7, dtype=np.uint8))
    return base64.b64encode(to_png_bytes(image)).decode("ascii")


class StubState:
    def __init__(self):
        self.fail_next: dict[str, int] = {}
        self.status_override: dict[str, int] = {}
        self.requests: list[tuple[str, dict, dict]] = []  # path, body, headers
        self.responses: dict[str, dict] = {
            "/layout": {"raw": json.dumps({"objects": []})},
            "/generate": {"png_base64": tiny_png_b64()},
            "/refine": {"png_base64": tiny_png_b64()},
            "/embed": {"values": [1.0, 0.0], "dim": 2},
        }


class StubHandler(BaseHTTPRequestHandler):
    state: StubState

    def do_POST(self):
        length = int(self.headers["Content-Length"])
        body = json.loads(self.rfile.read(length))
        self.state.requests.append((self.path, body, dict(self.headers)))
        if self.state.fail_next.get(self.path, 0) > 0:
            self.state.fail_next[self.path] -= 1
            self._reply(500, {"code": "boom", "message": "transient"})
            return
        status = self.state.status_override.get(self.path)
        if status is not None:
            self._reply(status, {"code": "bad", "message": "caller bug"})
            return
        self._reply(200, self.state.responses[self.path])

    def _reply(self, status: int, payload: dict):
        data = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture()
def stub():
    state = StubState()
    handler = type("Handler", (StubHandler,), {"state": state})
    server = ThreadingHTTPServer(("127.0.0.1", 0), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    state.base_url = f"http://127.0.0.1:{server.server_address[1]}"
    try:
        yield state
    finally:
        server.shutdown()
        thread.join(timeout=5)


def endpoint(stub, retry_budget=1) -> BackendEndpoint:
    return BackendEndpoint(base_url=stub.base_url, timeout=5.0, retry_budget=retry_budget)


SMALL_LAYOUT = Layout(
    objects=(ObjectSpec("dog", "a dog", BBox(0.1, 0.1, 0.5, 0.5)),),
    source_prompt="a dog",
)


class TestLayoutAdapter:
    def test_round_trip(self, stub):
        provider = HttpLayoutProvider(endpoint(stub))
        raw = provider.propose("a dog")
        assert raw == stub.responses["/layout"]["raw"]
        path, body, _headers = stub.requests[-1]
        assert path == "/layout"
        assert body == {"prompt": "a dog", "template_version": TEMPLATE_VERSION}

    def test_empty_prompt_rejected_before_transport(self, stub):
        with pytest.raises(ValueError):
            HttpLayoutProvider(endpoint(stub)).propose("  ")
        assert stub.requests == []

    def test_transport_failure_maps_to_layout_phase_failed(self, stub):
        stub.fail_next["/layout"] = 5
        with pytest.raises(LayoutPhaseFailed) as err:
            HttpLayoutProvider(endpoint(stub, retry_budget=1)).propose("a dog")
        assert "HTTP 500" in str(err.value)
        assert len(stub.requests) == 2  # 1 + retry_budget, never more


class TestGeneratorAdapter:
    def test_sends_wire_layout_and_decodes_png(self, stub):
        generator = HttpImageGenerator(endpoint(stub))
        image = generator.generate("a dog", SMALL_LAYOUT, seed=5, steps=50, guidance=7.5, width=8, height=8)
        assert image.pixels.shape == (8, 8, 3)
        _path, body, _ = stub.requests[-1]
        assert body["layout"] == {
            "objects": [{"label": "dog", "description": "a dog", "box": [0.1, 0.1, 0.5, 0.5]}]
        }
        assert body["seed"] == 5 and body["steps"] == 50 and body["guidance"] == 7.5

    def test_retry_then_success(self, stub):
        stub.fail_next["/generate"] = 1
        generator = HttpImageGenerator(endpoint(stub, retry_budget=2))
        image = generator.generate("p", SMALL_LAYOUT, seed=1, steps=1, guidance=0.0)
        assert image.width == 8
        assert len(stub.requests) == 2

    def test_exhausted_retries_surface_last_error(self, stub):
        stub.fail_next["/generate"] = 10
        with pytest.raises(GeneratorUnavailable) as err:
            HttpImageGenerator(endpoint(stub, retry_budget=1)).generate(
                "p", SMALL_LAYOUT, seed=1, steps=1, guidance=0.0
            )
        assert "transient" in str(err.value)  # final error text verbatim

    def test_4xx_is_not_retried(self, stub):
        stub.status_override["/generate"] = 422
        with pytest.raises(ProtocolError):
            HttpImageGenerator(endpoint(stub, retry_budget=3)).generate(
                "p", SMALL_LAYOUT, seed=1, steps=1, guidance=0.0
            )
        assert len(stub.requests) == 1

    def test_missing_key_is_protocol_error(self, stub):
        stub.responses["/generate"] = {"nope": 1}
        with pytest.raises(ProtocolError):
            HttpImageGenerator(endpoint(stub)).generate("p", SMALL_LAYOUT, seed=1, steps=1, guidance=0.0)


class TestRefinerAdapter:
    def test_posts_image_and_params(self, stub):
        refiner = HttpImageRefiner(endpoint(stub))
        source = Image(pixels=np.full((8, 8, 3), 9, dtype=np.uint8))
        out = refiner.refine(source, "p", seed=3, strength=0.5, guidance=0.0)
        assert out.pixels.shape == (8, 8, 3)
        _path, body, _ = stub.requests[-1]
        assert body["strength"] == 0.5
        decoded = base64.b64decode(body["png_base64"])
        assert decoded == to_png_bytes(source)


class TestEmbedderAdapter:
    def test_embed_text(self, stub):
        provider = HttpEmbeddingProvider(endpoint(stub))
        emb = provider.embed_text("a dog")
        assert emb.dim == 2
        assert stub.requests[-1][1] == {"text": "a dog"}

    def test_embed_image(self, stub):
        provider = HttpEmbeddingProvider(endpoint(stub))
        emb = provider.embed_image(Image(pixels=np.full((8, 8, 3), 1, dtype=np.uint8)))
        assert emb.dim == 2
        assert "png_base64" in stub.requests[-1][1]

    def test_transport_failure_maps_to_embedder_failed(self, stub):
        stub.fail_next["/embed"] = 10
        with pytest.raises(EmbedderFailed):
            HttpEmbeddingProvider(endpoint(stub, retry_budget=0)).embed_text("x")

    def test_dim_mismatch_is_protocol_error(self, stub):
        stub.responses["/embed"] = {"values": [1.0, 0.0], "dim": 3}
        with pytest.raises(ProtocolError):
            HttpEmbeddingProvider(endpoint(stub)).embed_text("x")


class TestAuth:
    def test_bearer_token_header(self, stub):
        ep = BackendEndpoint(base_url=stub.base_url, timeout=5.0, retry_budget=0, auth_token="sekrit")
        HttpLayoutProvider(ep).propose("a dog")
        headers = stub.requests[-1][2]
        assert headers.get("Authorization") == "Bearer sekrit"
