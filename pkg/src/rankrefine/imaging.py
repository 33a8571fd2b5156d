"""Raster image value type and lossless PNG round-tripping.

Images are RGB8 pixel arrays plus a small string-to-string metadata
mapping. Metadata rides along as PNG ``tEXt`` chunks, so it survives the
wire protocol (base64 PNG) byte-for-byte; the simulation backends use it
to attach their scene descriptors. Pixel operations never consult
metadata.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage
from PIL.PngImagePlugin import PngInfo


@dataclass(frozen=True)
class Image:
    """An RGB8 raster. ``pixels`` has shape (height, width, 3), dtype uint8."""

    pixels: np.ndarray
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
            raise ValueError(f"expected (H, W, 3) uint8 pixels, got {px.shape} {px.dtype}")

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    def pixel_bytes(self) -> bytes:
        return self.pixels.tobytes()


def to_png_bytes(image: Image) -> bytes:
    """Encode deterministically: metadata keys are written in sorted order."""
    info = PngInfo()
    for key in sorted(image.meta):
        info.add_text(key, image.meta[key])
    buf = io.BytesIO()
    PILImage.fromarray(image.pixels, mode="RGB").save(buf, format="PNG", pnginfo=info)
    return buf.getvalue()


def from_png_bytes(data: bytes) -> Image:
    with PILImage.open(io.BytesIO(data)) as im:
        meta = {k: v for k, v in im.text.items()} if hasattr(im, "text") else {}
        pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return Image(pixels=pixels, meta=meta)
