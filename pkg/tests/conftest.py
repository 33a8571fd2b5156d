"""Shared strategies and helpers for the test suite."""

from __future__ import annotations

import random

from hypothesis import assume
from hypothesis import strategies as st

from rankrefine.layout import MIN_BOX_EXTENT, BBox, Layout, ObjectSpec


def _is_valid_box(box: BBox, min_extent: float) -> bool:
    # recomputed extents can land a float ulp under the drawn width/height
    return (
        0.0 <= box.x_min < box.x_max <= 1.0
        and 0.0 <= box.y_min < box.y_max <= 1.0
        and box.width >= min_extent
        and box.height >= min_extent
    )


@st.composite
def valid_boxes(draw, min_extent: float = MIN_BOX_EXTENT):
    """Boxes satisfying the per-box invariants (in frame, not degenerate)."""
    w = draw(st.floats(min_value=min_extent * 1.01, max_value=1.0))
    h = draw(st.floats(min_value=min_extent * 1.01, max_value=1.0))
    x0 = draw(st.floats(min_value=0.0, max_value=1.0 - w))
    y0 = draw(st.floats(min_value=0.0, max_value=1.0 - h))
    box = BBox(x0, y0, min(x0 + w, 1.0), min(y0 + h, 1.0))
    assume(_is_valid_box(box, min_extent))
    return box


_LABELS = [
    "giraffe", "zebra", "chair", "ball", "sign", "dog", "cat", "car",
    "tree", "bench", "kite", "vase",
]


@st.composite
def valid_layouts(draw, max_objects: int = 6):
    n = draw(st.integers(min_value=0, max_value=max_objects))
    objects = tuple(
        ObjectSpec(
            label=(label := draw(st.sampled_from(_LABELS))),
            description=f"a {label}",
            box=draw(valid_boxes()),
        )
        for _ in range(n)
    )
    return Layout(objects=objects, source_prompt=draw(st.sampled_from(["p", "a photo"])))


def random_box(rng: random.Random, min_extent: float = MIN_BOX_EXTENT) -> BBox:
    """Plain-random valid box; used where hypothesis would be too slow."""
    while True:
        w = rng.uniform(min_extent, 1.0)
        h = rng.uniform(min_extent, 1.0)
        x0 = rng.uniform(0.0, 1.0 - w)
        y0 = rng.uniform(0.0, 1.0 - h)
        box = BBox(x0, y0, min(x0 + w, 1.0), min(y0 + h, 1.0))
        if _is_valid_box(box, min_extent):
            return box


def random_layout(rng: random.Random, k: int) -> Layout:
    objects = tuple(
        ObjectSpec(label=f"obj{i}", description=f"a obj{i}", box=random_box(rng))
        for i in range(k)
    )
    return Layout(objects=objects, source_prompt="fuzz")
