"""Geometry, validation, repair, and wire-format tests for layouts."""

from __future__ import annotations

import json
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rankrefine.errors import CoordinateError, ParseFailed, RepairFailed
from rankrefine.layout import (
    COMPLETE_OVERLAP,
    INVERTED_EXTENT,
    BBox,
    Layout,
    ObjectSpec,
    parse_layout_response,
    regularize_layout,
    repair_overlaps,
    serialize_layout,
    shrink_box,
    validate_layout,
)

from conftest import random_layout, valid_boxes, valid_layouts


def _layout(*boxes: tuple[float, float, float, float], prompt: str = "p") -> Layout:
    return Layout(
        objects=tuple(
            ObjectSpec(label=f"obj{i}", description=f"a obj{i}", box=BBox(*b))
            for i, b in enumerate(boxes)
        ),
        source_prompt=prompt,
    )


class TestValidateLayout:
    def test_single_valid_box(self):
        assert validate_layout(_layout((0.1, 0.1, 0.9, 0.9))) == []

    def test_inverted_extent(self):
        violations = validate_layout(_layout((0.5, 0.5, 0.4, 0.9)))
        assert [v.code for v in violations] == [INVERTED_EXTENT]
        assert violations[0].object_index == 0

    def test_complete_overlap_containment(self):
        violations = validate_layout(_layout((0.1, 0.1, 0.9, 0.9), (0.2, 0.2, 0.3, 0.3)))
        assert [v.code for v in violations] == [COMPLETE_OVERLAP]
        assert (violations[0].object_index, violations[0].other_index) == (0, 1)

    def test_partial_overlap_is_legal(self):
        assert validate_layout(_layout((0.1, 0.1, 0.5, 0.5), (0.3, 0.3, 0.7, 0.7))) == []

    def test_identical_boxes_overlap_both_ways(self):
        violations = validate_layout(_layout((0.2, 0.2, 0.6, 0.6), (0.2, 0.2, 0.6, 0.6)))
        assert [v.code for v in violations] == [COMPLETE_OVERLAP]

    def test_empty_layout(self):
        assert validate_layout(Layout(objects=(), source_prompt="")) == []


class TestShrinkBox:
    def test_unit_box_two_percent_margin(self):
        out = shrink_box(BBox(0, 0, 1, 1), 0.02)
        assert out == BBox(0.02, 0.02, 0.98, 0.98)

    def test_zero_margin_is_identity(self):
        box = BBox(0.2, 0.2, 0.8, 0.8)
        assert shrink_box(box, 0.0) == box

    def test_margin_scales_with_extent(self):
        out = shrink_box(BBox(0.0, 0.5, 0.5, 1.0), 0.04)
        assert out == BBox(0.02, 0.52, 0.48, 0.98)

    @pytest.mark.parametrize("delta", [-0.01, 0.25, 0.5, 1.0])
    def test_rejects_delta_outside_range(self, delta):
        with pytest.raises(ValueError):
            shrink_box(BBox(0, 0, 1, 1), delta)

    def test_rejects_invalid_box(self):
        with pytest.raises(ValueError):
            shrink_box(BBox(0.5, 0.5, 0.4, 0.9), 0.02)

    @given(box=valid_boxes(), delta=st.floats(min_value=1e-6, max_value=0.2499))
    def test_strict_containment_and_center(self, box, delta):
        out = shrink_box(box, delta)
        assert box.x_min < out.x_min < out.x_max < box.x_max
        assert box.y_min < out.y_min < out.y_max < box.y_max
        assert math.isclose(out.center[0], box.center[0], abs_tol=1e-12)
        assert math.isclose(out.center[1], box.center[1], abs_tol=1e-12)

    @given(box=valid_boxes(), delta=st.floats(min_value=0.0, max_value=0.2499))
    def test_area_law(self, box, delta):
        out = shrink_box(box, delta)
        assert abs(out.area - box.area * (1 - 2 * delta) ** 2) <= 1e-12

    @given(
        box=valid_boxes(),
        d1=st.floats(min_value=0.0, max_value=0.24),
        d2=st.floats(min_value=0.0, max_value=0.24),
    )
    def test_larger_delta_smaller_area(self, box, d1, d2):
        lo, hi = sorted([d1, d2])
        assert shrink_box(box, hi).area <= shrink_box(box, lo).area + 1e-15


class TestRegularizeLayout:
    def test_no_overlap_is_pure_shrink(self):
        layout = _layout((0.05, 0.05, 0.45, 0.45), (0.55, 0.55, 0.95, 0.95))
        out = regularize_layout(layout, 0.02)
        assert [o.label for o in out.objects] == ["obj0", "obj1"]
        for spec, original in zip(out.objects, layout.objects):
            assert spec.box == shrink_box(original.box, 0.02)
        assert validate_layout(out) == []

    def test_containment_repaired(self):
        layout = _layout((0.1, 0.1, 0.9, 0.9), (0.3, 0.3, 0.5, 0.5))
        out = regularize_layout(layout, 0.02)
        assert validate_layout(out) == []
        # object order and labels preserved
        assert [o.label for o in out.objects] == ["obj0", "obj1"]

    def test_empty_layout(self):
        out = regularize_layout(Layout(objects=(), source_prompt="x"), 0.02)
        assert out.objects == ()
        assert out.source_prompt == "x"

    def test_inverted_box_raises_repair_failed(self):
        with pytest.raises(RepairFailed):
            regularize_layout(_layout((0.5, 0.5, 0.4, 0.9)), 0.02)

    def test_sliver_box_raises_repair_failed(self):
        with pytest.raises(RepairFailed):
            regularize_layout(_layout((0.1, 0.1, 0.1005, 0.9)), 0.02)

    def test_out_of_frame_coordinates_are_clamped(self):
        layout = _layout((-0.2, 0.1, 0.5, 1.3))
        out = regularize_layout(layout, 0.02)
        assert validate_layout(out) == []
        box = out.objects[0].box
        assert box.x_min >= 0.0 and box.y_max <= 1.0

    def test_repair_never_grows_boxes(self):
        layout = _layout((0.1, 0.1, 0.9, 0.9), (0.3, 0.3, 0.5, 0.5), (0.35, 0.35, 0.45, 0.45))
        out = regularize_layout(layout, 0.02)
        for spec, original in zip(out.objects, layout.objects):
            shrunk = shrink_box(original.box, 0.02)
            assert spec.box.width <= shrunk.width + 1e-12
            assert spec.box.height <= shrunk.height + 1e-12

    def test_repair_is_fixpoint(self):
        layout = _layout((0.1, 0.1, 0.9, 0.9), (0.3, 0.3, 0.5, 0.5))
        once = repair_overlaps(layout)
        twice = repair_overlaps(once)
        assert once == twice

    @given(layout=valid_layouts())
    @settings(max_examples=150, deadline=None)
    def test_regularized_layouts_validate(self, layout):
        try:
            out = regularize_layout(layout, 0.02)
        except RepairFailed:
            return
        assert validate_layout(out) == []

    def test_fuzz_small(self):
        rng = random.Random(20240811)
        failures = 0
        for _ in range(500):
            layout = random_layout(rng, rng.randint(0, 8))
            try:
                out = regularize_layout(layout, 0.02)
            except RepairFailed:
                failures += 1
                continue
            assert validate_layout(out) == []
        assert failures < 50


class TestParseLayoutResponse:
    BARE = '{"objects":[{"label":"giraffe","description":"a giraffe","box":[0.1,0.2,0.4,0.9]}]}'

    def test_bare_document(self):
        layout = parse_layout_response(self.BARE, "a giraffe photo")
        assert len(layout) == 1
        spec = layout.objects[0]
        assert spec.label == "giraffe"
        assert spec.description == "a giraffe"
        assert spec.box == BBox(0.1, 0.2, 0.4, 0.9)
        assert layout.source_prompt == "a giraffe photo"

    def test_surrounding_prose_ignored(self):
        raw = f"Sure! Here is the layout: {self.BARE} Hope that helps."
        assert parse_layout_response(raw, "p") == parse_layout_response(self.BARE, "p")

    def test_code_fence_ignored(self):
        raw = f"```json\n{self.BARE}\n```"
        assert parse_layout_response(raw, "p") == parse_layout_response(self.BARE, "p")

    def test_refusal_raises_parse_failed(self):
        with pytest.raises(ParseFailed):
            parse_layout_response("I cannot produce a layout.", "p")

    def test_non_layout_json_is_skipped(self):
        raw = '{"note": "hi"} ' + self.BARE
        assert len(parse_layout_response(raw, "p")) == 1

    def test_coordinates_clamped(self):
        raw = '{"objects":[{"label":"dog","description":"a dog","box":[-0.1,0.0,1.02,0.5]}]}'
        box = parse_layout_response(raw, "p").objects[0].box
        assert box == BBox(0.0, 0.0, 1.0, 0.5)

    def test_missing_description_defaults_to_label(self):
        raw = '{"objects":[{"label":"dog","box":[0.1,0.1,0.5,0.5]}]}'
        assert parse_layout_response(raw, "p").objects[0].description == "dog"

    def test_bad_arity_raises_coordinate_error(self):
        raw = '{"objects":[{"label":"dog","description":"d","box":[0.1,0.1,0.5]}]}'
        with pytest.raises(CoordinateError):
            parse_layout_response(raw, "p")

    def test_non_numeric_raises_coordinate_error(self):
        raw = '{"objects":[{"label":"dog","description":"d","box":[0.1,"x",0.5,0.6]}]}'
        with pytest.raises(CoordinateError):
            parse_layout_response(raw, "p")

    def test_non_finite_raises_coordinate_error(self):
        raw = '{"objects":[{"label":"dog","description":"d","box":[0.1,NaN,0.5,0.6]}]}'
        with pytest.raises(CoordinateError):
            parse_layout_response(raw, "p")

    def test_empty_label_raises_parse_failed(self):
        raw = '{"objects":[{"label":"  ","description":"d","box":[0.1,0.1,0.5,0.6]}]}'
        with pytest.raises(ParseFailed):
            parse_layout_response(raw, "p")

    def test_objects_not_a_list(self):
        with pytest.raises(ParseFailed):
            parse_layout_response('{"objects": {"label": "x"}}', "p")

    def test_coordinate_error_is_retryable_parse_failure(self):
        assert issubclass(CoordinateError, ParseFailed)

    @given(layout=valid_layouts())
    @settings(max_examples=150, deadline=None)
    def test_round_trip_identity(self, layout):
        assert parse_layout_response(serialize_layout(layout), layout.source_prompt) == layout

    def test_document_order_preserved(self):
        raw = json.dumps(
            {
                "objects": [
                    {"label": "b", "description": "b", "box": [0.5, 0.5, 0.9, 0.9]},
                    {"label": "a", "description": "a", "box": [0.1, 0.1, 0.4, 0.4]},
                ]
            }
        )
        assert [o.label for o in parse_layout_response(raw, "p").objects] == ["b", "a"]
