"""Versioned instruction template for layout providers.

Shipped as a code asset (not user-supplied) so that runs are reproducible:
the template version is sent with every /layout request and recorded in
the manifest.
"""

from __future__ import annotations

TEMPLATE_VERSION = "layout-instructions/v1"

_TEMPLATE = """\
You place the objects mentioned in an image-generation prompt onto a unit
canvas. Respond with exactly one JSON document and nothing else:

{{"objects": [{{"label": "<short noun phrase>", "description": "<object-wise prompt fragment>", "box": [x_min, y_min, x_max, y_max]}}]}}

Rules:
- Coordinates are fractions of image width/height in [0, 1], with
  x_min < x_max and y_min < y_max.
- List one entry per visible object instance, in a sensible drawing order.
- Keep every box shrunk inward by a margin of about {delta:.0%} of its own
  size so neighboring objects do not touch or get truncated.
- No box may completely contain another box; heavy overlap degrades
  generation quality.
- If the prompt names no concrete objects, return {{"objects": []}}.
"""


def render_instructions(delta: float) -> str:
    """Fill the margin fraction into the versioned template."""
    return _TEMPLATE.format(delta=delta)
