"""Scene-level, object-level, and hybrid preference scores, plus re-ranking.

Scene score is cosine similarity between whole-image and prompt
embeddings; object score is the mean cosine similarity between each
layout crop and its object description; the hybrid score combines the two
with a weight in [0, 1]. Scores are computed once and cached on the
candidate — re-ranking is pure arithmetic over an immutable snapshot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionMismatch,
    EmbedderFailed,
    LambdaOutOfRange,
    UnscoredCandidate,
)
from .imaging import Image
from .layout import BBox, Layout

# Below this, generated images are too small to crop meaningfully.
MIN_IMAGE_SIDE = 64


@dataclass(eq=False)
class Embedding:
    """Fixed-length real vector. One embedder always emits one dim."""

    values: np.ndarray
    dim: int = 0

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1:
            raise ValueError(f"embedding must be a 1-d vector, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("embedding contains non-finite values")
        if self.dim == 0:
            self.dim = int(vals.shape[0])
        elif self.dim != int(vals.shape[0]):
            raise DimensionMismatch(f"declared dim {self.dim} != vector length {vals.shape[0]}")
        if not np.any(vals != 0.0):
            raise ValueError("embedders must not emit the zero vector")
        self.values = vals


@dataclass(frozen=True)
class HybridScore:
    """Scene/object pair and their combination; ``object`` is None when the
    layout had no objects (scene-only fallback, recorded as lambda 1.0)."""

    scene: float
    object: float | None
    lambda_used: float
    combined: float


@dataclass
class Candidate:
    """One generated image plus its provenance and cached score."""

    candidate_id: str
    image: Image
    seed: int
    round: int
    parent_id: str | None = None
    score: HybridScore | None = None

    def __post_init__(self) -> None:
        if self.round < 0:
            raise ValueError("round must be >= 0")
        if self.round == 0 and self.parent_id is not None:
            raise ValueError("round-0 drafts cannot have a parent")
        if self.round >= 1 and self.parent_id is None:
            raise ValueError("refined candidates must name their parent")
        if self.image.width < MIN_IMAGE_SIDE or self.image.height < MIN_IMAGE_SIDE:
            raise ValueError(
                f"image {self.image.width}x{self.image.height} below minimum side {MIN_IMAGE_SIDE}"
            )


def similarity(a: Embedding, b: Embedding) -> float:
    """Cosine similarity, clamped into [-1, 1].

    The denominator is sqrt(dot(a,a) * dot(b,b)) so that exact algebraic
    identities (self-similarity, positive scaling) survive floating point
    where the products are representable.
    """
    if a.dim != b.dim:
        raise DimensionMismatch(f"cannot compare embeddings of dim {a.dim} and {b.dim}")
    av = a.values
    bv = b.values
    num = float(av @ bv)
    denom = math.sqrt(float(av @ av) * float(bv @ bv))
    if not 0.0 < denom < math.inf:
        # squared norms under/overflowed; rescale to unit max magnitude
        av = av / np.max(np.abs(av))
        bv = bv / np.max(np.abs(bv))
        num = float(av @ bv)
        denom = math.sqrt(float(av @ av) * float(bv @ bv))
    return min(1.0, max(-1.0, num / denom))


def scene_score(image_emb: Embedding, prompt_emb: Embedding) -> float:
    """Holistic image-to-prompt alignment."""
    return similarity(image_emb, prompt_emb)


def crop_region(image: Image, box: BBox) -> Image:
    """Extract the pixel rectangle covering a normalized box.

    Pixel rule: [floor(x_min*W), ceil(x_max*W)) x [floor(y_min*H),
    ceil(y_max*H)), clamped so the result is at least 1x1. No resampling.
    """
    w = image.width
    h = image.height
    x0 = math.floor(box.x_min * w)
    x1 = math.ceil(box.x_max * w)
    y0 = math.floor(box.y_min * h)
    y1 = math.ceil(box.y_max * h)
    x0 = min(max(x0, 0), w - 1)
    y0 = min(max(y0, 0), h - 1)
    x1 = min(max(x1, x0 + 1), w)
    y1 = min(max(y1, y0 + 1), h)
    return Image(pixels=np.ascontiguousarray(image.pixels[y0:y1, x0:x1]))


def object_score(
    image: Image,
    layout: Layout,
    embedder,
    description_embeddings: list[Embedding] | None = None,
) -> float | None:
    """Mean crop-to-description similarity over all layout objects.

    Returns None for empty layouts (the hybrid score then falls back to
    scene-only). ``description_embeddings`` lets callers reuse per-run text
    embeddings instead of re-querying the embedder.
    """
    k = len(layout.objects)
    if k == 0:
        return None
    if description_embeddings is not None and len(description_embeddings) != k:
        raise ValueError("description embedding cache length does not match layout")
    total = 0.0
    for i, spec in enumerate(layout.objects):
        crop = crop_region(image, spec.box)
        try:
            crop_emb = embedder.embed_image(crop)
            desc_emb = (
                description_embeddings[i]
                if description_embeddings is not None
                else embedder.embed_text(spec.description)
            )
        except EmbedderFailed as exc:
            exc.object_index = i
            raise
        total += similarity(crop_emb, desc_emb)
    return total / k


def hybrid_score(scene: float, obj: float | None, lam: float) -> HybridScore:
    """Combine scene and object scores with weight ``lam`` on the scene.

    combined = lam * scene + (1 - lam) * obj, evaluated exactly once.
    With no object score the combination degenerates to the scene score
    and lambda_used records 1.0.
    """
    if not (0.0 <= lam <= 1.0):
        raise LambdaOutOfRange(f"lambda must be in [0, 1], got {lam}")
    if obj is None:
        return HybridScore(scene=scene, object=None, lambda_used=1.0, combined=scene)
    return HybridScore(
        scene=scene,
        object=obj,
        lambda_used=lam,
        combined=lam * scene + (1 - lam) * obj,
    )


def rank_key(candidate: Candidate, insertion_index: int) -> tuple:
    """Deterministic ordering: higher combined first, then lower round,
    lower seed, earlier insertion."""
    if candidate.score is None:
        raise UnscoredCandidate(f"candidate {candidate.candidate_id} has no score")
    return (-candidate.score.combined, candidate.round, candidate.seed, insertion_index)


def rerank_top_k(candidates: list[Candidate], k_keep: int) -> list[Candidate]:
    """Keep the best ``k_keep`` candidates by combined score.

    Fully deterministic including ties; the input list is not modified.
    """
    if k_keep < 1:
        raise ValueError(f"k_keep must be >= 1, got {k_keep}")
    order = sorted(enumerate(candidates), key=lambda pair: rank_key(pair[1], pair[0]))
    return [c for _i, c in order[:k_keep]]
