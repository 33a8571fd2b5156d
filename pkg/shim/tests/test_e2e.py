"""End-to-end smoke test: the engine CLI runs against a live shim.

The shim only talks to the engine through the wire protocol and the
manifest file format, so this test drives the engine as a subprocess and
checks the manifest JSON directly.
"""

from __future__ import annotations

import json
import socket
import subprocess
import sys
import threading
import time

import pytest
import uvicorn

from modelshim.app import build_service
from modelshim.config import ShimConfig


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


@pytest.fixture(scope="module")
def shim_url():
    port = free_port()
    app = build_service(ShimConfig(port=port))
    server = uvicorn.Server(
        uvicorn.Config(app, host="127.0.0.1", port=port, log_level="warning")
    )
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    deadline = time.time() + 15
    while not server.started:
        if time.time() > deadline:
            raise RuntimeError("shim did not start in time")
        time.sleep(0.05)
    yield f"http://127.0.0.1:{port}"
    server.should_exit = True
    thread.join(timeout=5)


def test_engine_run_against_shim(shim_url, tmp_path):
    out_dir = tmp_path / "run"
    result = subprocess.run(
        [
            sys.executable,
            "-m",
            "rankrefine.cli",
            "run",
            "--prompt",
            "two dogs and a cat",
            "--backend",
            "http",
            "--endpoint-url",
            shim_url,
            "--n-drafts",
            "2",
            "--rounds",
            "1",
            "--m-variants",
            "2",
            "--image-size",
            "96",
            "--seed",
            "5",
            "--out-dir",
            str(out_dir),
        ],
        capture_output=True,
        text=True,
        timeout=120,
    )
    assert result.returncode == 0, f"stdout:\n{result.stdout}\nstderr:\n{result.stderr}"

    manifest = json.loads((out_dir / "manifest.json").read_text())
    assert manifest["schema_version"] == 1
    assert manifest["backend_info"]["kind"] == "http"
    candidates = manifest["candidates"]
    assert len(candidates) == 4  # 2 drafts + 2 refinement variants
    ids = {c["id"] for c in candidates}
    assert manifest["final_candidate_id"] in ids
    for candidate in candidates:
        assert candidate["score"] is not None
        image_path = out_dir / candidate["image_path"]
        assert image_path.exists()
        assert image_path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    rounds = manifest["rounds"]
    assert [r["round_index"] for r in rounds] == [0, 1]
    assert rounds[1]["kept_candidate_ids"]
