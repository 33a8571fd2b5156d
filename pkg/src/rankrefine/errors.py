"""Exception hierarchy shared across the pipeline.

Every error the engine can surface maps to one category here; the CLI
translates categories to exit codes.
"""

from __future__ import annotations


class RankRefineError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(RankRefineError):
    """Invalid configuration value or unreadable config file."""


class ParseFailed(RankRefineError):
    """No structured layout block found in provider output, or the block
    does not match the wire schema. Retryable against the provider."""


class CoordinateError(ParseFailed):
    """A box entry is not a 4-tuple of finite numbers.

    Subclass of ParseFailed so the provider retry loop covers it.
    """


class RepairFailed(RankRefineError):
    """Overlap repair could not produce a valid layout within the bounded
    number of adjustment passes. Signals a degenerate provider layout;
    callers should re-query the layout provider."""


class DimensionMismatch(RankRefineError):
    """Embeddings of different dimensionality were combined."""


class LambdaOutOfRange(RankRefineError):
    """Hybrid weight outside [0, 1]."""


class UnscoredCandidate(RankRefineError):
    """A candidate without a computed score reached re-ranking."""


class BackendError(RankRefineError):
    """Base class for backend-call failures."""


class LayoutPhaseFailed(BackendError):
    """Layout provider retries exhausted (transport, parse, or repair)."""


class GeneratorUnavailable(BackendError):
    """Generator backend unreachable (transport-level)."""


class GenerationFailed(BackendError):
    """One draft generation failed; carries the offending seed."""

    def __init__(self, seed: int, message: str = "") -> None:
        super().__init__(message or f"generation failed for seed {seed}")
        self.seed = seed


class AllGenerationFailed(BackendError):
    """Every draft seed failed; the run cannot proceed."""


class RefinerUnavailable(BackendError):
    """Refiner backend unreachable (transport-level)."""


class RefinerFailed(BackendError):
    """One refinement call failed."""


class EmbedderFailed(BackendError):
    """Embedding call failed; ``object_index`` is set when the failure
    occurred while scoring a specific layout object."""

    def __init__(self, message: str, object_index: int | None = None) -> None:
        super().__init__(message)
        self.object_index = object_index


class EmptyRun(RankRefineError):
    """A manifest with no scored candidates was asked for a final pick."""


class ManifestError(RankRefineError):
    """Manifest file missing, unreadable, or schema-incompatible."""
