"""Service configuration."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class ShimConfig:
    """Which model serves each endpoint, plus process-level knobs.

    Model identifiers use a scheme prefix: ``builtin:`` entries run
    weight-free on any CPU; ``hf-clip:`` loads a CLIP checkpoint through
    transformers for /embed.
    """

    layout_model: str = "builtin:grid-layout/1"
    generate_model: str = "builtin:box-painter/1"
    refine_model: str = "builtin:noise-blend/1"
    embed_model: str = "builtin:hash-features/1"
    device: str = "cpu"
    max_concurrent_jobs: int = 2
    host: str = "127.0.0.1"
    port: int = 8080

    def validate(self) -> None:
        if not (1 <= self.port <= 65535):
            raise ValueError(f"port must be in [1, 65535], got {self.port}")
        if self.max_concurrent_jobs < 1:
            raise ValueError("max_concurrent_jobs must be >= 1")

    def models(self) -> dict[str, str]:
        return {
            "layout": self.layout_model,
            "generate": self.generate_model,
            "refine": self.refine_model,
            "embed": self.embed_model,
        }
