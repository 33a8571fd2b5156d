"""Model registry and implementations.

The builtin models are weight-free procedural stand-ins that honor the
protocol semantics (seeded sampling, strength-bounded refinement, shared
embedding space); swap in real checkpoints via the model identifier
scheme when the hardware has them. Every builtin is deterministic per
request.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import re

import numpy as np
from PIL import Image, ImageFilter


class ModelLoadError(RuntimeError):
    """The configured model identifier cannot be loaded on this host."""


def _hash64(*parts: object) -> int:
    payload = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "big")


_WORD_RE = re.compile(r"[a-z0-9]+")
_STOPWORDS = frozenset(
    "a an the of on in at by with and or for to from photo photograph picture "
    "image painting drawing realistic style scene view shot left right above "
    "below next front behind beside under over top bottom near between".split()
)
_NUMBER_WORDS = {
    "one": 1, "two": 2, "three": 3, "four": 4,
    "five": 5, "six": 6, "seven": 7, "eight": 8,
}


class GridLayoutModel:
    """Heuristic prompt-to-layout parser: content nouns onto a grid."""

    def propose(self, prompt: str, template_version: str) -> str:
        labels: list[str] = []
        pending = 1
        for word in _WORD_RE.findall(prompt.lower()):
            if word in _NUMBER_WORDS:
                pending = _NUMBER_WORDS[word]
                continue
            if word.isdigit():
                pending = max(1, min(int(word), 8))
                continue
            if word in _STOPWORDS:
                continue
            if len(word) > 3 and word.endswith("s") and not word.endswith("ss"):
                word = word[:-1]
            labels.extend([word] * pending)
            pending = 1
        labels = labels[:8]
        objects = []
        if labels:
            cols = math.ceil(math.sqrt(len(labels)))
            rows = math.ceil(len(labels) / cols)
            for i, label in enumerate(labels):
                r, c = divmod(i, cols)
                pad_x = 0.08 / cols
                pad_y = 0.08 / rows
                objects.append(
                    {
                        "label": label,
                        "description": f"a {label}",
                        "box": [
                            c / cols + pad_x,
                            r / rows + pad_y,
                            (c + 1) / cols - pad_x,
                            (r + 1) / rows - pad_y,
                        ],
                    }
                )
        return json.dumps({"objects": objects})


def _label_color(label: str) -> tuple[int, int, int]:
    h = _hash64("color", label)
    # keep channels away from pure white so objects stay visible
    return (h % 229, (h >> 8) % 229, (h >> 16) % 229)


class BoxPainterModel:
    """Layout-conditioned painter; the request seed drives its sampler."""

    def generate(
        self,
        prompt: str,
        layout: dict,
        seed: int,
        steps: int,
        guidance: float,
        width: int,
        height: int,
    ) -> Image.Image:
        rng = np.random.default_rng(seed)
        canvas = np.full((height, width, 3), 255, dtype=np.float64)
        for entry in layout.get("objects", []):
            x0, y0, x1, y1 = entry["box"]
            jitter = rng.normal(0.0, 0.01, size=2)
            x0 = min(max(x0 + jitter[0], 0.0), 1.0)
            x1 = min(max(x1 + jitter[0], 0.0), 1.0)
            y0 = min(max(y0 + jitter[1], 0.0), 1.0)
            y1 = min(max(y1 + jitter[1], 0.0), 1.0)
            px0, px1 = int(x0 * width), max(int(x0 * width) + 1, int(x1 * width))
            py0, py1 = int(y0 * height), max(int(y0 * height) + 1, int(y1 * height))
            canvas[py0:py1, px0:px1] = _label_color(entry["label"])
        # fewer sampling steps leaves more residual speckle
        amplitude = max(1.0, 24.0 / max(steps, 1))
        noise = rng.normal(0.0, amplitude, size=canvas.shape)
        return Image.fromarray(
            np.clip(canvas + noise, 0, 255).astype(np.uint8), mode="RGB"
        )


class NoiseBlendRefineModel:
    """Partial denoise: blur-blend by strength plus seeded residual noise."""

    def refine(
        self,
        image: Image.Image,
        prompt: str,
        seed: int,
        strength: float,
        guidance: float,
    ) -> Image.Image:
        rng = np.random.default_rng(seed)
        source = np.asarray(image.convert("RGB"), dtype=np.float64)
        blurred = np.asarray(
            image.convert("RGB").filter(ImageFilter.BoxBlur(1)), dtype=np.float64
        )
        mixed = (1.0 - strength) * source + strength * blurred
        noise = rng.normal(0.0, 2.0 * strength, size=mixed.shape)
        return Image.fromarray(np.clip(mixed + noise, 0, 255).astype(np.uint8), mode="RGB")


class HashFeatureEmbedModel:
    """Shared 64-d feature space: 4x4x4 RGB histograms for images, and
    token counts dropped into the histogram bin of each token's paint
    color, so text and the box painter's output genuinely correlate."""

    dim = 64

    @staticmethod
    def _token_bin(token: str) -> int:
        r, g, b = _label_color(token)
        return (r // 64) * 16 + (g // 64) * 4 + (b // 64)

    def embed_text(self, text: str) -> list[float]:
        values = [0.0] * self.dim
        tokens = [t for t in _WORD_RE.findall(text.lower()) if t not in _STOPWORDS and t not in _NUMBER_WORDS]
        if not tokens:
            values[0] = 1.0
            return values
        for token in tokens:
            if len(token) > 3 and token.endswith("s") and not token.endswith("ss"):
                token = token[:-1]
            values[self._token_bin(token)] += 1.0
        return values

    def embed_image(self, image: Image.Image) -> list[float]:
        px = np.asarray(image.convert("RGB"), dtype=np.uint8).reshape(-1, 3)
        bins = (px // 64).astype(np.int64)  # 4 levels per channel -> 64 bins
        keys = bins[:, 0] * 16 + bins[:, 1] * 4 + bins[:, 2]
        counts = np.bincount(keys, minlength=self.dim).astype(np.float64)
        return (counts / counts.sum()).tolist()


class HfClipEmbedModel:
    """CLIP checkpoint via transformers; used when real weights exist."""

    def __init__(self, model_id: str, device: str) -> None:
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise ModelLoadError(f"transformers/torch unavailable: {exc}") from exc
        try:
            self._model = CLIPModel.from_pretrained(model_id).to(device).eval()
            self._processor = CLIPProcessor.from_pretrained(model_id)
        except Exception as exc:  # weight download/load failure
            raise ModelLoadError(f"cannot load CLIP checkpoint {model_id!r}: {exc}") from exc
        self._torch = torch
        self.dim = int(self._model.config.projection_dim)

    def embed_text(self, text: str) -> list[float]:
        inputs = self._processor(text=[text], return_tensors="pt", padding=True, truncation=True)
        with self._torch.no_grad():
            features = self._model.get_text_features(**inputs)
        return features[0].cpu().tolist()

    def embed_image(self, image: Image.Image) -> list[float]:
        inputs = self._processor(images=[image.convert("RGB")], return_tensors="pt")
        with self._torch.no_grad():
            features = self._model.get_image_features(**inputs)
        return features[0].cpu().tolist()


def load_model(endpoint: str, identifier: str, device: str):
    """Instantiate the model serving one endpoint, or raise ModelLoadError."""
    if endpoint == "layout":
        if identifier == "builtin:grid-layout/1":
            return GridLayoutModel()
    elif endpoint == "generate":
        if identifier == "builtin:box-painter/1":
            return BoxPainterModel()
    elif endpoint == "refine":
        if identifier == "builtin:noise-blend/1":
            return NoiseBlendRefineModel()
    elif endpoint == "embed":
        if identifier == "builtin:hash-features/1":
            return HashFeatureEmbedModel()
        if identifier.startswith("hf-clip:"):
            return HfClipEmbedModel(identifier.removeprefix("hf-clip:"), device)
    else:
        raise ModelLoadError(f"unknown endpoint {endpoint!r}")
    raise ModelLoadError(f"no {endpoint} model named {identifier!r} on this host")


def png_bytes(image: Image.Image) -> bytes:
    buf = io.BytesIO()
    image.save(buf, format="PNG")
    return buf.getvalue()
