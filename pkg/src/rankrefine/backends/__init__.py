"""Pluggable backends: layout provider, generator, refiner, embedder.

``sim`` hosts the deterministic simulation suite used by property tests;
``http`` hosts adapters for remote services speaking the wire protocol.
"""

from .base import BackendEndpoint, Backends, EmbeddingProvider, ImageGenerator, ImageRefiner, LayoutProvider

__all__ = [
    "BackendEndpoint",
    "Backends",
    "EmbeddingProvider",
    "ImageGenerator",
    "ImageRefiner",
    "LayoutProvider",
]
