"""Backend interfaces and endpoint configuration.

All four backends are structural protocols: anything with the right
methods plugs in. Implementations must tolerate concurrent calls; every
result flows back through the orchestrator's deterministic merge.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, runtime_checkable

from ..imaging import Image
from ..layout import Layout
from ..scoring import Embedding


@dataclass(frozen=True)
class BackendEndpoint:
    """Where and how to reach one remote backend."""

    base_url: str
    timeout: float = 30.0
    retry_budget: int = 2
    auth_token: str | None = None

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.retry_budget < 0:
            raise ValueError("retry_budget must be >= 0")


@runtime_checkable
class LayoutProvider(Protocol):
    def propose(self, prompt: str) -> str:
        """Return provider text expected to contain one wire-schema layout."""
        ...


@runtime_checkable
class ImageGenerator(Protocol):
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
        """Render one layout-grounded draft, deterministic per inputs."""
        ...


@runtime_checkable
class ImageRefiner(Protocol):
    def refine(
        self,
        image: Image,
        prompt: str,
        seed: int,
        strength: float,
        guidance: float,
    ) -> Image:
        """Partially re-noise and re-render an image at the given strength."""
        ...


@runtime_checkable
class EmbeddingProvider(Protocol):
    def embed_image(self, image: Image) -> Embedding: ...

    def embed_text(self, text: str) -> Embedding: ...


@dataclass
class Backends:
    """The four backends one pipeline run needs."""

    layout: LayoutProvider
    generator: ImageGenerator
    refiner: ImageRefiner
    embedder: EmbeddingProvider
