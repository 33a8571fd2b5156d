"""Deterministic simulation backends.

The simulated stack models exactly two generation failure modes:
misplacement (per-object offsets drawn at noise level ``sigma_place``) and
omission (per-object dropout). Every backend is a pure function of its
arguments, byte-for-byte repeatable, and hand-computable:

- the layout provider derives a jittered grid layout from the prompt text;
- the generator paints each surviving object as a solid-color rectangle at
  its intended box translated by its offset, and stores the full scene
  descriptor in the image metadata;
- the refiner re-renders the parent's descriptor with offsets and noise
  level contracted by (1 - strength), clearing dropout flags with
  seed-derived probability equal to the strength;
- the embedder maps text tokens to fixed basis axes and images to their
  exact per-axis pixel-color fractions, so cosine similarity between a
  crop and its label is the fraction of the crop covered by the label's
  color (plus a background term).
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import threading
from dataclasses import dataclass

import numpy as np

from ..errors import EmbedderFailed, GenerationFailed, RefinerFailed
from ..imaging import Image
from ..layout import Layout
from ..scoring import Embedding

SCENE_META_KEY = "scene_descriptor"

# 256 object axes plus one background axis.
EMBED_DIM = 257
BACKGROUND_AXIS = 256
BACKGROUND_COLOR = (255, 255, 255)

_NOISE_CLIP_SIGMAS = 3.0

STOPWORDS = frozenset(
    """
    a an the of on in at by with and or for to from photo photograph picture
    image painting drawing realistic style scene view shot left right above
    below next front behind beside under over top bottom near between
    """.split()
)

NUMBER_WORDS = {
    "one": 1, "two": 2, "three": 3, "four": 4,
    "five": 5, "six": 6, "seven": 7, "eight": 8,
}

_MAX_OBJECTS = 8
_WORD_RE = re.compile(r"[a-z0-9]+")


def _singularize(token: str) -> str:
    if len(token) > 3 and token.endswith("s") and not token.endswith("ss"):
        return token[:-1]
    return token


def content_tokens(text: str) -> list[str]:
    """Lowercased, singularized tokens with stopwords and counts removed.

    Shared by the layout provider (label selection) and the embedder
    (text axes), which is what aligns prompt, layout, and pixels in the
    simulated world.
    """
    out = []
    for raw in _WORD_RE.findall(text.lower()):
        if raw in STOPWORDS or raw in NUMBER_WORDS or raw.isdigit():
            continue
        out.append(_singularize(raw))
    return out


def _hash64(*parts: object) -> int:
    payload = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "big")


def label_axis(token: str) -> int:
    """Stable axis in [0, 256) for a (singularized) token."""
    return _hash64("axis", _singularize(token.lower())) % 256


def axis_color(axis: int) -> tuple[int, int, int]:
    """Injective axis-to-RGB map; never produces the white background."""
    return ((37 * axis + 11) % 256, (59 * axis + 83) % 256, (97 * axis + 29) % 256)


_KEY_TO_AXIS = {
    (r << 16) | (g << 8) | b: axis
    for axis, (r, g, b) in ((a, axis_color(a)) for a in range(256))
}


@dataclass(frozen=True)
class SceneObject:
    """Simulated state of one layout object in one rendered scene."""

    label: str
    intended: tuple[float, float, float, float]
    offset: tuple[float, float]
    dropped: bool
    color: tuple[int, int, int]

    @property
    def rendered(self) -> tuple[float, float, float, float] | None:
        """Where the rectangle lands: intended translated by the offset,
        slid back inside the frame; absent when dropped."""
        if self.dropped:
            return None
        x0, y0, x1, y1 = self.intended
        w = x1 - x0
        h = y1 - y0
        nx0 = min(max(x0 + self.offset[0], 0.0), 1.0 - w)
        ny0 = min(max(y0 + self.offset[1], 0.0), 1.0 - h)
        return (nx0, ny0, nx0 + w, ny0 + h)


@dataclass(frozen=True)
class SceneDescriptor:
    """Complete recipe for one simulated image; travels in PNG metadata."""

    objects: tuple[SceneObject, ...]
    sigma_place: float
    dropout_rate: float
    seed: int
    width: int
    height: int

    def to_json(self) -> str:
        doc = {
            "objects": [
                {
                    "label": o.label,
                    "intended": list(o.intended),
                    "offset": list(o.offset),
                    "dropped": o.dropped,
                    "color": list(o.color),
                    "rendered": list(o.rendered) if o.rendered else None,
                }
                for o in self.objects
            ],
            "sigma_place": self.sigma_place,
            "dropout_rate": self.dropout_rate,
            "seed": self.seed,
            "width": self.width,
            "height": self.height,
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, raw: str) -> SceneDescriptor:
        doc = json.loads(raw)
        objects = tuple(
            SceneObject(
                label=o["label"],
                intended=tuple(o["intended"]),
                offset=tuple(o["offset"]),
                dropped=o["dropped"],
                color=tuple(o["color"]),
            )
            for o in doc["objects"]
        )
        return cls(
            objects=objects,
            sigma_place=doc["sigma_place"],
            dropout_rate=doc["dropout_rate"],
            seed=doc["seed"],
            width=doc["width"],
            height=doc["height"],
        )


def render_scene(descriptor: SceneDescriptor) -> Image:
    """Paint the descriptor: white canvas, one solid rectangle per
    surviving object, larger rectangles first (deterministic painter's
    order).

    An object's paint region is its rendered box clipped to its intended
    box: a layout-grounded generator keeps objects inside their assigned
    regions, so misplacement truncates the object instead of spilling it
    into neighbors. This is what makes refinement (offset contraction)
    monotonically recover each object's visible area.
    """
    w, h = descriptor.width, descriptor.height
    canvas = np.full((h, w, 3), 255, dtype=np.uint8)
    order = sorted(
        range(len(descriptor.objects)),
        key=lambda i: (-_area(descriptor.objects[i].intended), i),
    )
    for i in order:
        obj = descriptor.objects[i]
        rendered = obj.rendered
        if rendered is None:
            continue
        x0 = max(rendered[0], obj.intended[0])
        y0 = max(rendered[1], obj.intended[1])
        x1 = min(rendered[2], obj.intended[2])
        y1 = min(rendered[3], obj.intended[3])
        if x1 <= x0 or y1 <= y0:
            continue
        px0 = min(max(math.floor(x0 * w), 0), w - 1)
        px1 = min(max(math.ceil(x1 * w), px0 + 1), w)
        py0 = min(max(math.floor(y0 * h), 0), h - 1)
        py1 = min(max(math.ceil(y1 * h), py0 + 1), h)
        canvas[py0:py1, px0:px1] = obj.color
    return Image(pixels=canvas, meta={SCENE_META_KEY: descriptor.to_json()})


def _area(box: tuple[float, float, float, float]) -> float:
    return max(0.0, box[2] - box[0]) * max(0.0, box[3] - box[1])


class SimLayoutProvider:
    """Returns a schema-valid grid layout derived from the prompt text.

    Number words multiply the following object token ("four giraffes" ->
    four giraffe entries). The response is wrapped in prose or a code
    fence for some prompts to keep the parser honest.
    """

    def __init__(self) -> None:
        self.calls = 0
        self._lock = threading.Lock()

    def propose(self, prompt: str) -> str:
        if not prompt or not prompt.strip():
            raise ValueError("prompt must be non-empty")
        with self._lock:
            self.calls += 1
        labels = self._labels(prompt)
        layout_doc = {"objects": self._place(labels, prompt)}
        body = json.dumps(layout_doc)
        variant = _hash64("wrap", prompt) % 3
        if variant == 1:
            return f"Here is the layout you asked for: {body} Let me know if it works."
        if variant == 2:
            return f"```json\n{body}\n```"
        return body

    @staticmethod
    def _labels(prompt: str) -> list[str]:
        labels: list[str] = []
        pending_count = 1
        for raw in _WORD_RE.findall(prompt.lower()):
            if raw in NUMBER_WORDS:
                pending_count = NUMBER_WORDS[raw]
                continue
            if raw.isdigit():
                pending_count = max(1, min(int(raw), _MAX_OBJECTS))
                continue
            if raw in STOPWORDS:
                continue
            labels.extend([_singularize(raw)] * pending_count)
            pending_count = 1
        return labels[:_MAX_OBJECTS]

    @staticmethod
    def _place(labels: list[str], prompt: str) -> list[dict]:
        k = len(labels)
        if k == 0:
            return []
        cols = math.ceil(math.sqrt(k))
        rows = math.ceil(k / cols)
        cell_w = 1.0 / cols
        cell_h = 1.0 / rows
        rng = np.random.default_rng([_hash64("layout", prompt), k])
        entries = []
        for i, label in enumerate(labels):
            r, c = divmod(i, cols)
            pad_x = 0.08 * cell_w
            pad_y = 0.08 * cell_h
            jx = rng.uniform(-0.05, 0.05) * cell_w
            jy = rng.uniform(-0.05, 0.05) * cell_h
            x0 = c * cell_w + pad_x + jx
            y0 = r * cell_h + pad_y + jy
            x1 = (c + 1) * cell_w - pad_x + jx
            y1 = (r + 1) * cell_h - pad_y + jy
            box = [
                min(max(x0, 0.0), 1.0),
                min(max(y0, 0.0), 1.0),
                min(max(x1, 0.0), 1.0),
                min(max(y1, 0.0), 1.0),
            ]
            entries.append({"label": label, "description": f"a {label}", "box": box})
        return entries


class SimImageGenerator:
    """Layout-grounded rectangle painter with seeded misplacement/omission."""

    def __init__(
        self,
        sigma_place: float = 0.08,
        dropout_rate: float = 0.15,
        fail_seeds: frozenset[int] = frozenset(),
    ) -> None:
        if sigma_place < 0:
            raise ValueError("sigma_place must be >= 0")
        if not (0.0 <= dropout_rate < 1.0):
            raise ValueError("dropout_rate must be in [0, 1)")
        self.sigma_place = sigma_place
        self.dropout_rate = dropout_rate
        self.fail_seeds = fail_seeds
        self.calls = 0
        self._lock = threading.Lock()

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
        with self._lock:
            self.calls += 1
        if seed in self.fail_seeds:
            raise GenerationFailed(seed, f"injected failure for seed {seed}")
        objects = []
        for i, spec in enumerate(layout.objects):
            rng = np.random.default_rng([_hash64("gen", seed), i])
            dropped = bool(rng.uniform() < self.dropout_rate)
            bound = _NOISE_CLIP_SIGMAS * self.sigma_place
            dx = float(np.clip(rng.normal(0.0, self.sigma_place), -bound, bound)) if self.sigma_place else 0.0
            dy = float(np.clip(rng.normal(0.0, self.sigma_place), -bound, bound)) if self.sigma_place else 0.0
            objects.append(
                SceneObject(
                    label=spec.label,
                    intended=spec.box.as_tuple(),
                    offset=(dx, dy),
                    dropped=dropped,
                    color=axis_color(label_axis(spec.label)),
                )
            )
        descriptor = SceneDescriptor(
            objects=tuple(objects),
            sigma_place=self.sigma_place,
            dropout_rate=self.dropout_rate,
            seed=seed,
            width=width,
            height=height,
        )
        return render_scene(descriptor)


class SimImageRefiner:
    """Partial re-rendering: contracts placement noise by (1 - strength)
    and revives dropped objects with probability equal to the strength."""

    def __init__(self, fail_seeds: frozenset[int] = frozenset()) -> None:
        self.fail_seeds = fail_seeds
        self.calls = 0
        self._lock = threading.Lock()

    def refine(
        self,
        image: Image,
        prompt: str,
        seed: int,
        strength: float,
        guidance: float,
    ) -> Image:
        if not (0.0 < strength < 1.0):
            raise ValueError(f"strength must be in (0, 1), got {strength}")
        with self._lock:
            self.calls += 1
        if seed in self.fail_seeds:
            raise RefinerFailed(f"injected failure for refine seed {seed}")
        raw = image.meta.get(SCENE_META_KEY)
        if raw is None:
            raise RefinerFailed("image carries no scene descriptor; cannot simulate refinement")
        parent = SceneDescriptor.from_json(raw)
        keep = 1.0 - strength
        sigma_child = parent.sigma_place * keep
        objects = []
        for i, obj in enumerate(parent.objects):
            rng = np.random.default_rng([_hash64("refine", seed), i])
            revive = bool(rng.uniform() < strength)
            if obj.dropped and revive:
                bound = _NOISE_CLIP_SIGMAS * sigma_child
                dx = float(np.clip(rng.normal(0.0, sigma_child), -bound, bound)) if sigma_child else 0.0
                dy = float(np.clip(rng.normal(0.0, sigma_child), -bound, bound)) if sigma_child else 0.0
                objects.append(
                    SceneObject(
                        label=obj.label,
                        intended=obj.intended,
                        offset=(dx, dy),
                        dropped=False,
                        color=obj.color,
                    )
                )
            else:
                objects.append(
                    SceneObject(
                        label=obj.label,
                        intended=obj.intended,
                        offset=(obj.offset[0] * keep, obj.offset[1] * keep),
                        dropped=obj.dropped,
                        color=obj.color,
                    )
                )
        descriptor = SceneDescriptor(
            objects=tuple(objects),
            sigma_place=sigma_child,
            dropout_rate=parent.dropout_rate,
            seed=seed,
            width=parent.width,
            height=parent.height,
        )
        return render_scene(descriptor)


class SimEmbedder:
    """Oracle embedder over the fixed axis basis.

    Image embeddings are exact per-axis pixel fractions (unknown colors
    count as background), text embeddings are token counts on the same
    axes, so similarities are hand-computable from pixel counts.
    """

    dim = EMBED_DIM

    def __init__(self, fail_on_text: frozenset[str] = frozenset()) -> None:
        self.image_calls = 0
        self.text_calls = 0
        self.fail_on_text = fail_on_text
        self._lock = threading.Lock()

    def embed_image(self, image: Image) -> Embedding:
        with self._lock:
            self.image_calls += 1
        px = image.pixels.reshape(-1, 3).astype(np.uint32)
        keys = (px[:, 0] << 16) | (px[:, 1] << 8) | px[:, 2]
        unique, counts = np.unique(keys, return_counts=True)
        values = np.zeros(EMBED_DIM, dtype=np.float64)
        total = float(keys.shape[0])
        for key, count in zip(unique.tolist(), counts.tolist()):
            values[_KEY_TO_AXIS.get(key, BACKGROUND_AXIS)] += count / total
        return Embedding(values)

    def embed_text(self, text: str) -> Embedding:
        with self._lock:
            self.text_calls += 1
        if text in self.fail_on_text:
            raise EmbedderFailed(f"injected failure for text {text!r}")
        values = np.zeros(EMBED_DIM, dtype=np.float64)
        tokens = content_tokens(text)
        if not tokens:
            values[BACKGROUND_AXIS] = 1.0
        else:
            for token in tokens:
                values[label_axis(token)] += 1.0
        return Embedding(values)


@dataclass
class SimBackends:
    """Bundle of simulation backends with their shared knobs."""

    layout: SimLayoutProvider
    generator: SimImageGenerator
    refiner: SimImageRefiner
    embedder: SimEmbedder
    sigma_place: float = 0.08
    dropout_rate: float = 0.15


def make_sim_backends(
    sigma_place: float = 0.08,
    dropout_rate: float = 0.15,
    fail_generate_seeds: frozenset[int] = frozenset(),
    fail_refine_seeds: frozenset[int] = frozenset(),
) -> SimBackends:
    return SimBackends(
        layout=SimLayoutProvider(),
        generator=SimImageGenerator(sigma_place, dropout_rate, fail_generate_seeds),
        refiner=SimImageRefiner(fail_refine_seeds),
        embedder=SimEmbedder(),
        sigma_place=sigma_place,
        dropout_rate=dropout_rate,
    )
