"""FastAPI application implementing the four-endpoint wire protocol.

Requests queue behind a bounded worker semaphore; the service is
stateless between requests apart from the loaded models. Error bodies
are always ``{"code": ..., "message": ...}``: 4xx means the caller sent
something invalid, 5xx means this host is at fault (503 while models are
still loading).
"""

from __future__ import annotations

import base64
import binascii
import io
import logging
import threading
from typing import Optional

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, Field, model_validator

from .config import ShimConfig
from .models import ModelLoadError, load_model, png_bytes

logger = logging.getLogger(__name__)


class LayoutRequest(BaseModel):
    prompt: str = Field(min_length=1)
    template_version: str = "layout-instructions/v1"


class LayoutResponse(BaseModel):
    raw: str


class LayoutObject(BaseModel):
    label: str = Field(min_length=1)
    description: str
    box: list[float] = Field(min_length=4, max_length=4)


class LayoutDocument(BaseModel):
    objects: list[LayoutObject]


class GenerateRequest(BaseModel):
    prompt: str = Field(min_length=1)
    layout: LayoutDocument
    seed: int = Field(ge=0)
    steps: int = Field(default=50, ge=1)
    guidance: float = 7.5
    width: int = Field(default=512, ge=64, le=4096)
    height: int = Field(default=512, ge=64, le=4096)


class ImageResponse(BaseModel):
    png_base64: str


class RefineRequest(BaseModel):
    png_base64: str
    prompt: str = Field(min_length=1)
    seed: int = Field(ge=0)
    strength: float = Field(gt=0.0, lt=1.0)  # echo (0.0) and full redraw (1.0) disallowed
    guidance: float = 0.0


class EmbedRequest(BaseModel):
    png_base64: Optional[str] = None
    text: Optional[str] = None

    @model_validator(mode="after")
    def _exactly_one_payload(self):
        if (self.png_base64 is None) == (self.text is None):
            raise ValueError("provide exactly one of png_base64 or text")
        return self


class EmbedResponse(BaseModel):
    values: list[float]
    dim: int


class ProtocolFault(Exception):
    def __init__(self, status: int, code: str, message: str) -> None:
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


class ModelHost:
    """Owns the four models and their load state."""

    def __init__(self, config: ShimConfig) -> None:
        config.validate()
        self.config = config
        self._models: dict[str, object] = {}
        self._errors: dict[str, str] = {}
        self._lock = threading.Lock()
        self._jobs = threading.Semaphore(config.max_concurrent_jobs)

    def load_all(self) -> None:
        for endpoint, identifier in self.config.models().items():
            try:
                model = load_model(endpoint, identifier, self.config.device)
            except ModelLoadError as exc:
                logger.error("failed to load %s model %s: %s", endpoint, identifier, exc)
                with self._lock:
                    self._errors[endpoint] = str(exc)
                continue
            with self._lock:
                self._models[endpoint] = model

    def model(self, endpoint: str):
        with self._lock:
            model = self._models.get(endpoint)
            error = self._errors.get(endpoint)
        if model is not None:
            return model
        if error is not None:
            raise ProtocolFault(503, "model_unavailable", f"{endpoint} model failed to load: {error}")
        raise ProtocolFault(503, "loading", f"{endpoint} model is still loading")

    def status(self) -> dict:
        with self._lock:
            loaded = {
                endpoint: self.config.models()[endpoint] for endpoint in self._models
            }
            errors = dict(self._errors)
        expected = self.config.models()
        if set(loaded) == set(expected):
            status = "ok"
        elif errors:
            status = "degraded"
        else:
            status = "loading"
        return {"status": status, "models_loaded": loaded, "errors": errors}

    def run_job(self, fn, *args):
        with self._jobs:
            return fn(*args)


def _decode_png(encoded: str) -> Image.Image:
    try:
        data = base64.b64decode(encoded, validate=True)
        image = Image.open(io.BytesIO(data))
        image.load()
        return image
    except (binascii.Error, UnidentifiedImageError, OSError, ValueError) as exc:
        raise ProtocolFault(422, "invalid_image", f"png_base64 is not a decodable PNG: {exc}")


def create_app(host: ModelHost) -> FastAPI:
    app = FastAPI(title="rankrefine model shim", version="0.1.0")

    @app.exception_handler(RequestValidationError)
    async def validation_handler(_request: Request, exc: RequestValidationError):
        return JSONResponse(
            status_code=422,
            content={"code": "invalid_request", "message": str(exc.errors()[:3])},
        )

    @app.exception_handler(ProtocolFault)
    async def fault_handler(_request: Request, exc: ProtocolFault):
        return JSONResponse(
            status_code=exc.status, content={"code": exc.code, "message": exc.message}
        )

    @app.exception_handler(Exception)
    async def crash_handler(_request: Request, exc: Exception):
        logger.exception("unhandled error")
        return JSONResponse(
            status_code=500, content={"code": "internal", "message": str(exc)}
        )

    @app.get("/healthz")
    def healthz():
        return host.status()

    @app.post("/layout", response_model=LayoutResponse)
    def layout(request: LayoutRequest):
        model = host.model("layout")
        raw = host.run_job(model.propose, request.prompt, request.template_version)
        return LayoutResponse(raw=raw)

    @app.post("/generate", response_model=ImageResponse)
    def generate(request: GenerateRequest):
        model = host.model("generate")
        image = host.run_job(
            lambda: model.generate(
                request.prompt,
                request.layout.model_dump(),
                request.seed,
                request.steps,
                request.guidance,
                request.width,
                request.height,
            )
        )
        return ImageResponse(png_base64=base64.b64encode(png_bytes(image)).decode("ascii"))

    @app.post("/refine", response_model=ImageResponse)
    def refine(request: RefineRequest):
        model = host.model("refine")
        source = _decode_png(request.png_base64)
        image = host.run_job(
            lambda: model.refine(
                source, request.prompt, request.seed, request.strength, request.guidance
            )
        )
        return ImageResponse(png_base64=base64.b64encode(png_bytes(image)).decode("ascii"))

    @app.post("/embed", response_model=EmbedResponse)
    def embed(request: EmbedRequest):
        model = host.model("embed")
        if request.text is not None:
            values = host.run_job(model.embed_text, request.text)
        else:
            values = host.run_job(model.embed_image, _decode_png(request.png_base64))
        return EmbedResponse(values=values, dim=len(values))

    return app


def build_service(config: ShimConfig | None = None, load: bool = True) -> FastAPI:
    """App factory: loads models synchronously by default (builtins are
    instant; checkpoint-backed models answer 503 until ready otherwise)."""
    host = ModelHost(config or ShimConfig())
    if load:
        host.load_all()
    return create_app(host)
