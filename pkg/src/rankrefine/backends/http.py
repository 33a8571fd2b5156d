"""HTTP adapters speaking the shared wire protocol.

All four endpoints are POST with JSON bodies; images cross the wire as
base64 PNG. 5xx and transport errors are retried up to the endpoint's
retry budget; 4xx means a caller bug and is surfaced immediately. The
final error text is preserved verbatim so the manifest can record it.
"""

from __future__ import annotations

import base64
import logging
import time

import numpy as np
import requests

from ..errors import (
    BackendError,
    DimensionMismatch,
    EmbedderFailed,
    GeneratorUnavailable,
    LayoutPhaseFailed,
    RefinerUnavailable,
)
from ..imaging import Image, from_png_bytes, to_png_bytes
from ..layout import Layout, layout_to_wire
from ..scoring import Embedding
from .base import BackendEndpoint
from .template import TEMPLATE_VERSION

logger = logging.getLogger(__name__)

_RETRY_BACKOFF = 0.2


class ProtocolError(BackendError):
    """The remote answered, but not with a protocol-shaped response."""


def _post_json(session: requests.Session, endpoint: BackendEndpoint, path: str, payload: dict) -> dict:
    url = endpoint.base_url.rstrip("/") + path
    headers = {}
    if endpoint.auth_token:
        headers["Authorization"] = f"Bearer {endpoint.auth_token}"
    attempts = endpoint.retry_budget + 1
    last_error = ""
    for attempt in range(attempts):
        try:
            response = session.post(url, json=payload, timeout=endpoint.timeout, headers=headers)
        except requests.RequestException as exc:
            last_error = f"{type(exc).__name__}: {exc}"
        else:
            if response.status_code < 400:
                try:
                    return response.json()
                except ValueError as exc:
                    raise ProtocolError(f"POST {path}: non-JSON response body ({exc})") from exc
            if response.status_code < 500:
                raise ProtocolError(f"POST {path}: HTTP {response.status_code}: {response.text}")
            last_error = f"HTTP {response.status_code}: {response.text}"
        if attempt + 1 < attempts:
            logger.warning("POST %s attempt %d/%d failed: %s", path, attempt + 1, attempts, last_error)
            time.sleep(_RETRY_BACKOFF * (2**attempt))
    raise BackendError(f"POST {path} failed after {attempts} attempt(s): {last_error}")


def _require(payload: dict, key: str, path: str):
    if key not in payload:
        raise ProtocolError(f"POST {path}: response missing {key!r}")
    return payload[key]


class HttpLayoutProvider:
    def __init__(self, endpoint: BackendEndpoint, template_version: str = TEMPLATE_VERSION) -> None:
        self.endpoint = endpoint
        self.template_version = template_version
        self._session = requests.Session()

    def propose(self, prompt: str) -> str:
        if not prompt or not prompt.strip():
            raise ValueError("prompt must be non-empty")
        try:
            body = _post_json(
                self._session,
                self.endpoint,
                "/layout",
                {"prompt": prompt, "template_version": self.template_version},
            )
        except BackendError as exc:
            raise LayoutPhaseFailed(str(exc)) from exc
        raw = _require(body, "raw", "/layout")
        if not isinstance(raw, str):
            raise ProtocolError("/layout: 'raw' must be a string")
        return raw


class HttpImageGenerator:
    def __init__(self, endpoint: BackendEndpoint) -> None:
        self.endpoint = endpoint
        self._session = requests.Session()

    def generate(
        self,
        prompt: str,
        layout: Layout,
        seed: int,
        steps: int,
        guidance: float,
        width: int = 512,
        height: int = 512,
    ) -> Image:
        payload = {
            "prompt": prompt,
            "layout": layout_to_wire(layout),
            "seed": seed,
            "steps": steps,
            "guidance": guidance,
            "width": width,
            "height": height,
        }
        try:
            body = _post_json(self._session, self.endpoint, "/generate", payload)
        except ProtocolError:
            raise
        except BackendError as exc:
            raise GeneratorUnavailable(str(exc)) from exc
        return _decode_png(_require(body, "png_base64", "/generate"), "/generate")


class HttpImageRefiner:
    def __init__(self, endpoint: BackendEndpoint) -> None:
        self.endpoint = endpoint
        self._session = requests.Session()

    def refine(self, image: Image, prompt: str, seed: int, strength: float, guidance: float) -> Image:
        payload = {
            "png_base64": base64.b64encode(to_png_bytes(image)).decode("ascii"),
            "prompt": prompt,
            "seed": seed,
            "strength": strength,
            "guidance": guidance,
        }
        try:
            body = _post_json(self._session, self.endpoint, "/refine", payload)
        except ProtocolError:
            raise
        except BackendError as exc:
            raise RefinerUnavailable(str(exc)) from exc
        return _decode_png(_require(body, "png_base64", "/refine"), "/refine")


class HttpEmbeddingProvider:
    def __init__(self, endpoint: BackendEndpoint) -> None:
        self.endpoint = endpoint
        self._session = requests.Session()

    def embed_image(self, image: Image) -> Embedding:
        payload = {"png_base64": base64.b64encode(to_png_bytes(image)).decode("ascii")}
        return self._embed(payload)

    def embed_text(self, text: str) -> Embedding:
        return self._embed({"text": text})

    def _embed(self, payload: dict) -> Embedding:
        try:
            body = _post_json(self._session, self.endpoint, "/embed", payload)
        except ProtocolError:
            raise
        except BackendError as exc:
            raise EmbedderFailed(str(exc)) from exc
        values = _require(body, "values", "/embed")
        dim = _require(body, "dim", "/embed")
        try:
            return Embedding(np.asarray(values, dtype=np.float64), dim=int(dim))
        except (TypeError, ValueError, DimensionMismatch) as exc:
            raise ProtocolError(f"/embed: malformed embedding payload ({exc})") from exc


def _decode_png(encoded: str, path: str) -> Image:
    try:
        return from_png_bytes(base64.b64decode(encoded))
    except Exception as exc:
        raise ProtocolError(f"POST {path}: undecodable PNG payload ({exc})") from exc
