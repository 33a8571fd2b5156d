"""Object layouts: representation, validation, parsing, and regularization.

A layout is an ordered list of labelled boxes in normalized [0,1]
coordinates. Providers emit layouts as a single JSON document (the wire
schema); this module turns provider text into values, checks the geometric
invariants, and repairs the ones that can be repaired by shrinking or
translating boxes inside the frame.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

from .errors import CoordinateError, ParseFailed, RepairFailed

logger = logging.getLogger(__name__)

# Boxes thinner than 1% of the image side break both rendering and cropping.
MIN_BOX_EXTENT = 0.01

# Margin fraction range providers are instructed to honor; values outside
# are accepted but logged.
DELTA_RECOMMENDED = (0.02, 0.04)
DELTA_MAX = 0.25

_MAX_REPAIR_PASSES = 8
_REPAIR_SHRINK_FACTOR = 0.9
# How far past the enclosing edge a translated box is pushed so that the
# containment predicate flips under float comparison.
_ESCAPE_MARGIN = 1e-7


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, corners normalized to the unit square."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)

    def contains(self, other: BBox) -> bool:
        """Non-strict containment: equal boxes contain each other."""
        return (
            self.x_min <= other.x_min
            and self.y_min <= other.y_min
            and other.x_max <= self.x_max
            and other.y_max <= self.y_max
        )

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class ObjectSpec:
    """One layout entry: a short label, its prompt fragment, and its box."""

    label: str
    description: str
    box: BBox


@dataclass(frozen=True)
class Layout:
    """Ordered object layout for one prompt."""

    objects: tuple[ObjectSpec, ...]
    source_prompt: str = ""

    def __len__(self) -> int:
        return len(self.objects)


@dataclass(frozen=True)
class Violation:
    """One broken layout rule, as data. ``other_index`` is set for pair rules."""

    code: str
    object_index: int
    other_index: int | None = None
    message: str = ""


NON_FINITE = "NonFinite"
OUT_OF_RANGE = "OutOfRange"
INVERTED_EXTENT = "InvertedExtent"
TOO_SMALL = "TooSmall"
COMPLETE_OVERLAP = "CompleteOverlap"


def _box_violations(index: int, box: BBox) -> list[Violation]:
    coords = box.as_tuple()
    if not all(math.isfinite(c) for c in coords):
        return [Violation(NON_FINITE, index, message=f"non-finite coordinate in {coords}")]
    out: list[Violation] = []
    if not (0.0 <= box.x_min and box.x_max <= 1.0 and 0.0 <= box.y_min and box.y_max <= 1.0):
        out.append(Violation(OUT_OF_RANGE, index, message=f"coordinates outside [0,1]: {coords}"))
    if not (box.x_min < box.x_max and box.y_min < box.y_max):
        out.append(Violation(INVERTED_EXTENT, index, message=f"min/max inverted or empty: {coords}"))
    elif box.width < MIN_BOX_EXTENT or box.height < MIN_BOX_EXTENT:
        out.append(
            Violation(
                TOO_SMALL,
                index,
                message=f"extent below {MIN_BOX_EXTENT}: {box.width:.4f}x{box.height:.4f}",
            )
        )
    return out


def validate_layout(layout: Layout) -> list[Violation]:
    """Check every box invariant plus the no-complete-overlap rule.

    Returns an empty list iff the layout is valid. Violations are data,
    not errors: callers decide whether to repair, retry, or abort.
    """
    violations: list[Violation] = []
    boxes = [spec.box for spec in layout.objects]
    for i, spec in enumerate(layout.objects):
        if not spec.label:
            violations.append(Violation("EmptyLabel", i, message="label must be non-empty"))
        violations.extend(_box_violations(i, spec.box))
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            if boxes[i].contains(boxes[j]) or boxes[j].contains(boxes[i]):
                violations.append(
                    Violation(
                        COMPLETE_OVERLAP,
                        i,
                        other_index=j,
                        message=f"boxes {i} and {j} completely overlap",
                    )
                )
    return violations


def shrink_box(box: BBox, delta: float) -> BBox:
    """Inset a box by ``delta`` of its own width/height on every side.

    The result is strictly inside the input (for delta > 0) and shares
    its center; area scales by (1 - 2*delta)^2.
    """
    if not (0.0 <= delta < DELTA_MAX):
        raise ValueError(f"delta must be in [0, {DELTA_MAX}), got {delta}")
    if _box_violations(0, box):
        raise ValueError(f"cannot shrink invalid box {box.as_tuple()}")
    w = box.width
    h = box.height
    return BBox(
        x_min=box.x_min + delta * w,
        y_min=box.y_min + delta * h,
        x_max=box.x_max - delta * w,
        y_max=box.y_max - delta * h,
    )


def _clamp01(value: float) -> float:
    return min(max(value, 0.0), 1.0)


def _clamped_translate(box: BBox, dx: float, dy: float) -> BBox:
    """Translate preserving size, sliding along frame edges when needed."""
    w = box.width
    h = box.height
    x0 = min(max(box.x_min + dx, 0.0), 1.0 - w)
    y0 = min(max(box.y_min + dy, 0.0), 1.0 - h)
    return BBox(x0, y0, x0 + w, y0 + h)


def _shrink_about_center(box: BBox, factor: float) -> BBox:
    cx, cy = box.center
    hw = box.width * factor / 2.0
    hh = box.height * factor / 2.0
    return BBox(cx - hw, cy - hh, cx + hw, cy + hh)


def _escape_push(inner: BBox, outer: BBox) -> tuple[float, float] | None:
    """Smallest translation along the center-to-center direction that moves
    ``inner`` out of non-strict containment in ``outer``, or None when the
    frame blocks every escape axis."""
    icx, icy = inner.center
    ocx, ocy = outer.center
    dx = icx - ocx
    dy = icy - ocy
    if abs(dx) < 1e-12 and abs(dy) < 1e-12:
        # concentric: pick the first frame-feasible axis direction
        for cand_dx, cand_dy in ((1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)):
            feasible_right = cand_dx > 0 and outer.x_max + _ESCAPE_MARGIN <= 1.0
            feasible_left = cand_dx < 0 and outer.x_min - _ESCAPE_MARGIN >= 0.0
            feasible_down = cand_dy > 0 and outer.y_max + _ESCAPE_MARGIN <= 1.0
            feasible_up = cand_dy < 0 and outer.y_min - _ESCAPE_MARGIN >= 0.0
            if feasible_right or feasible_left or feasible_down or feasible_up:
                dx, dy = cand_dx, cand_dy
                break
        else:
            return None

    candidates: list[float] = []
    if dx > 0 and outer.x_max + _ESCAPE_MARGIN <= 1.0:
        candidates.append((outer.x_max - inner.x_max + _ESCAPE_MARGIN) / dx)
    elif dx < 0 and outer.x_min - _ESCAPE_MARGIN >= 0.0:
        candidates.append((outer.x_min - inner.x_min - _ESCAPE_MARGIN) / dx)
    if dy > 0 and outer.y_max + _ESCAPE_MARGIN <= 1.0:
        candidates.append((outer.y_max - inner.y_max + _ESCAPE_MARGIN) / dy)
    elif dy < 0 and outer.y_min - _ESCAPE_MARGIN >= 0.0:
        candidates.append((outer.y_min - inner.y_min - _ESCAPE_MARGIN) / dy)

    if not candidates:
        return None
    p = min(candidates)
    return (p * dx, p * dy)


def repair_overlaps(layout: Layout) -> Layout:
    """Break every complete-overlap pair by translating the contained box
    outward, shrinking it when the frame traps it.

    Deterministic for a fixed object order; idempotent on layouts that are
    already overlap-free. Raises RepairFailed when the pass budget runs out
    or a trapped box cannot shrink further.
    """
    boxes = [spec.box for spec in layout.objects]
    n = len(boxes)
    for _ in range(_MAX_REPAIR_PASSES):
        dirty = False
        for i in range(n):
            for j in range(n):
                if i == j or not boxes[i].contains(boxes[j]):
                    continue
                push = _escape_push(boxes[j], boxes[i])
                if push is not None:
                    moved = _clamped_translate(boxes[j], push[0], push[1])
                    if not boxes[i].contains(moved):
                        boxes[j] = moved
                        dirty = True
                        continue
                shrunk = _shrink_about_center(boxes[j], _REPAIR_SHRINK_FACTOR)
                if shrunk.width < MIN_BOX_EXTENT or shrunk.height < MIN_BOX_EXTENT:
                    raise RepairFailed(
                        f"box {j} is trapped inside box {i} and cannot shrink below "
                        f"the minimum extent"
                    )
                boxes[j] = shrunk
                dirty = True
        if not dirty:
            break
    remaining = [v for v in _overlap_violations(boxes)]
    if remaining:
        raise RepairFailed(
            f"{len(remaining)} complete-overlap pair(s) left after "
            f"{_MAX_REPAIR_PASSES} repair passes"
        )
    objects = tuple(
        ObjectSpec(spec.label, spec.description, box)
        for spec, box in zip(layout.objects, boxes)
    )
    return Layout(objects=objects, source_prompt=layout.source_prompt)


def _overlap_violations(boxes: list[BBox]) -> list[tuple[int, int]]:
    pairs = []
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            if boxes[i].contains(boxes[j]) or boxes[j].contains(boxes[i]):
                pairs.append((i, j))
    return pairs


def regularize_layout(layout: Layout, delta: float) -> Layout:
    """Apply the margin shrink to every box, then repair complete overlaps.

    Coordinates are clamped into [0,1] first (provider overshoot is intent,
    not error). Boxes that are inverted, degenerate, or would shrink below
    the minimum extent cannot be fixed by shrink/translate alone and raise
    RepairFailed so the caller can re-query the provider. The returned
    layout always passes validate_layout.
    """
    if not (0.0 <= delta < DELTA_MAX):
        raise ValueError(f"delta must be in [0, {DELTA_MAX}), got {delta}")
    if not (DELTA_RECOMMENDED[0] <= delta <= DELTA_RECOMMENDED[1]):
        logger.warning(
            "delta=%.4f outside the recommended range [%.2f, %.2f]",
            delta,
            *DELTA_RECOMMENDED,
        )

    shrunk: list[ObjectSpec] = []
    for i, spec in enumerate(layout.objects):
        coords = spec.box.as_tuple()
        if not all(math.isfinite(c) for c in coords):
            raise RepairFailed(f"box {i} has non-finite coordinates {coords}")
        box = BBox(*(_clamp01(c) for c in coords))
        if not (box.x_min < box.x_max and box.y_min < box.y_max):
            raise RepairFailed(f"box {i} is inverted or empty after clamping: {box.as_tuple()}")
        if box.width * (1 - 2 * delta) < MIN_BOX_EXTENT or box.height * (1 - 2 * delta) < MIN_BOX_EXTENT:
            raise RepairFailed(
                f"box {i} would fall below the minimum extent after the margin shrink"
            )
        shrunk.append(ObjectSpec(spec.label, spec.description, shrink_box(box, delta)))

    repaired = repair_overlaps(Layout(objects=tuple(shrunk), source_prompt=layout.source_prompt))
    leftover = validate_layout(repaired)
    if leftover:
        raise RepairFailed(f"layout still invalid after repair: {leftover[0].message}")
    return repaired


# --- wire schema -----------------------------------------------------------
#
# {"objects": [{"label": str, "description": str, "box": [x0, y0, x1, y1]}]}
# Numbers are decimal in [0,1]; object order is significant.


def layout_to_wire(layout: Layout) -> dict:
    return {
        "objects": [
            {
                "label": spec.label,
                "description": spec.description,
                "box": list(spec.box.as_tuple()),
            }
            for spec in layout.objects
        ]
    }


def serialize_layout(layout: Layout) -> str:
    return json.dumps(layout_to_wire(layout))


def _iter_json_objects(raw: str):
    decoder = json.JSONDecoder()
    pos = raw.find("{")
    while pos != -1:
        try:
            value, _end = decoder.raw_decode(raw, pos)
        except json.JSONDecodeError:
            pos = raw.find("{", pos + 1)
            continue
        yield value
        pos = raw.find("{", pos + 1)


def parse_layout_response(raw: str, prompt: str) -> Layout:
    """Extract the first wire-schema document from provider text.

    Surrounding prose and code fences are ignored; strictness applies to
    the document itself. Coordinates are clamped to [0,1]. Raises
    ParseFailed when no structured block is found or the schema does not
    match, CoordinateError for malformed box entries.
    """
    document = None
    for value in _iter_json_objects(raw):
        if isinstance(value, dict) and "objects" in value:
            document = value
            break
    if document is None:
        raise ParseFailed("no layout document found in provider response")

    entries = document["objects"]
    if not isinstance(entries, list):
        raise ParseFailed(f"'objects' must be a list, got {type(entries).__name__}")

    objects: list[ObjectSpec] = []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise ParseFailed(f"object {i} is not a mapping")
        label = entry.get("label")
        if not isinstance(label, str) or not label.strip():
            raise ParseFailed(f"object {i} has no usable label")
        label = label.strip()
        description = entry.get("description")
        if not isinstance(description, str) or not description.strip():
            description = label
        else:
            description = description.strip()
        box_raw = entry.get("box")
        if not isinstance(box_raw, (list, tuple)) or len(box_raw) != 4:
            raise CoordinateError(f"object {i} box must be a 4-element array, got {box_raw!r}")
        coords = []
        for c in box_raw:
            if isinstance(c, bool) or not isinstance(c, (int, float)) or not math.isfinite(c):
                raise CoordinateError(f"object {i} box has non-numeric entry {c!r}")
            coords.append(_clamp01(float(c)))
        objects.append(ObjectSpec(label=label, description=description, box=BBox(*coords)))

    return Layout(objects=tuple(objects), source_prompt=prompt)
