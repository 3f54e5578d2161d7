"""Tests for layout documents, rasterization and sliding boxes."""

import json

import numpy as np
import pytest

from b2b_guidance.errors import ContractViolation, LayoutParseError, LayoutValidationError
from b2b_guidance.layout import (
    BoundingBox,
    GridMask,
    LayoutAttribute,
    LayoutObject,
    LayoutSpec,
    dump_layout,
    parse_layout,
    rasterize_mask,
    sample_sliding_boxes,
)


def _document(**overrides):
    document = {
        "prompt": "a red ball",
        "tokens": ["a", "red", "ball"],
        "objects": [{"token_index": 2, "box": [0.25, 0.25, 0.75, 0.75]}],
        "attributes": [{"token_index": 1, "parent_object": 0}],
    }
    document.update(overrides)
    return json.dumps(document)


class TestParseLayout:

    def test_valid_document(self):
        layout = parse_layout(_document())
        assert layout.n_tokens == 3
        assert layout.n_objects == 1
        assert layout.n_attributes == 1
        assert layout.objects[0].box == BoundingBox(0.25, 0.25, 0.75, 0.75)
        assert layout.attributes[0] == LayoutAttribute(1, 0)

    def test_dump_then_parse_is_equal(self):
        layout = parse_layout(_document())
        assert parse_layout(dump_layout(layout)) == layout

    def test_no_objects_is_valid(self):
        layout = parse_layout(_document(objects=[], attributes=[]))
        assert layout.n_objects == 0

    def test_malformed_json(self):
        with pytest.raises(LayoutParseError):
            parse_layout("{not json")

    def test_wrong_box_arity_names_field(self):
        with pytest.raises(LayoutParseError) as info:
            parse_layout(_document(objects=[{"token_index": 2, "box": [0.1, 0.1, 0.5]}]))
        assert info.value.field.startswith("objects.0.box")

    def test_unknown_key_rejected(self):
        with pytest.raises(LayoutParseError):
            parse_layout(_document(colour="red"))

    def test_byte_order_mark_rejected(self):
        with pytest.raises(LayoutParseError):
            parse_layout("\ufeff" + _document())

    def test_inverted_box_rejected(self):
        with pytest.raises(LayoutValidationError) as info:
            parse_layout(_document(objects=[{"token_index": 2, "box": [0.7, 0.2, 0.3, 0.8]}]))
        assert any("objects.0.box" in v for v in info.value.violations)

    def test_every_violation_listed(self):
        with pytest.raises(LayoutValidationError) as info:
            parse_layout(_document(
                objects=[{"token_index": 7, "box": [0.1, 0.1, 0.5, 0.5]}],
                attributes=[{"token_index": 1, "parent_object": 3}],
            ))
        assert len(info.value.violations) >= 2

    def test_box_and_index_violations_reported_together(self):
        with pytest.raises(LayoutValidationError) as info:
            parse_layout(_document(
                objects=[{"token_index": 2, "box": [0.5, 0.1, 0.5, 0.6]}],
                attributes=[{"token_index": 2, "parent_object": 5}],
            ))
        violations = info.value.violations
        assert len(violations) == 3
        assert any("zero-area" in v for v in violations)
        assert any("duplicates" in v for v in violations)
        assert any("parent_object=5" in v for v in violations)

    def test_invalid_utf8_is_parse_error(self):
        with pytest.raises(LayoutParseError) as info:
            parse_layout(b'{"prompt": "\xff", "tokens": ["a"]}')
        assert info.value.field == "document"

    def test_utf8_bytes_accepted(self):
        assert parse_layout(_document().encode("utf-8")) == parse_layout(_document())

    def test_duplicate_token_rejected(self):
        with pytest.raises(LayoutValidationError):
            parse_layout(_document(attributes=[{"token_index": 2, "parent_object": 0}]))

    def test_box_out_of_unit_square(self):
        with pytest.raises(LayoutValidationError):
            BoundingBox(-0.1, 0.0, 0.5, 0.5)


class TestRasterize:

    def test_quarter_box_covers_quarter_of_cells(self):
        mask = rasterize_mask(BoundingBox(0.25, 0.25, 0.75, 0.75), 16, 16)
        assert mask.count == 64
        assert mask.extent() == (4, 11, 4, 11)

    def test_full_box_covers_grid(self):
        mask = rasterize_mask(BoundingBox(0.0, 0.0, 1.0, 1.0), 8, 8)
        assert mask.count == 64
        assert mask.complement().count == 0

    def test_tiny_box_snaps_to_one_cell(self):
        mask = rasterize_mask(BoundingBox(0.50, 0.50, 0.51, 0.51), 8, 8)
        assert mask.count == 1
        assert mask.cells[4, 4]

    def test_tiny_box_at_right_edge_stays_on_grid(self):
        mask = rasterize_mask(BoundingBox(0.995, 0.0, 1.0, 0.004), 4, 4)
        assert mask.count == 1
        assert mask.cells[0, 3]

    def test_half_open_rule(self):
        # cell centres at 0.125, 0.375, 0.625, 0.875
        mask = rasterize_mask(BoundingBox(0.125, 0.0, 0.625, 1.0), 4, 4)
        assert mask.cells[0].tolist() == [True, True, False, False]

    def test_top_left_quarter(self):
        mask = rasterize_mask(BoundingBox(0.0, 0.0, 0.5, 0.5), 16, 16)
        expected = np.zeros((16, 16), dtype=bool)
        expected[:8, :8] = True
        np.testing.assert_array_equal(mask.cells, expected)

    def test_nested_boxes_give_nested_masks(self):
        rng = np.random.default_rng(12)
        for _ in range(200):
            x0, y0 = rng.uniform(0.0, 0.4, size=2)
            x1, y1 = rng.uniform(0.6, 1.0, size=2)
            outer = BoundingBox(float(x0), float(y0), float(x1), float(y1))
            ix0, iy0 = rng.uniform([x0, y0], [0.5, 0.5])
            ix1, iy1 = rng.uniform([0.5, 0.5], [x1, y1])
            inner = BoundingBox(float(ix0), float(iy0), float(ix1), float(iy1))
            assert outer.contains(inner)
            big, small = rasterize_mask(outer, 16, 16), rasterize_mask(inner, 16, 16)
            assert not (small.cells & ~big.cells).any()

    @pytest.mark.parametrize("k, j", [(-3, 0), (0, -4), (2, 1), (5, 3), (8, 6)])
    def test_translating_box_by_whole_cells_shifts_mask(self, k, j):
        # edges sit between cell centres, so the shift is exact in floating point
        box = BoundingBox(0.2, 0.3, 0.45, 0.6)
        moved = rasterize_mask(box.translated(k / 16, j / 16), 16, 16)
        assert moved == rasterize_mask(box, 16, 16).shifted(k, j)

    def test_mask_is_read_only(self):
        mask = rasterize_mask(BoundingBox(0.0, 0.0, 0.5, 0.5), 4, 4)
        with pytest.raises(ValueError):
            mask.cells[0, 0] = False


class TestGridMask:

    def test_shift_drops_cells_past_border(self):
        mask = rasterize_mask(BoundingBox(0.0, 0.0, 0.5, 0.5), 4, 4)
        moved = mask.shifted(3, 0)
        assert moved.count == 2
        assert moved.cells[0, 3] and moved.cells[1, 3]

    def test_mask_and_complement_partition_the_grid(self):
        mask = rasterize_mask(BoundingBox(0.1, 0.3, 0.7, 0.9), 7, 9)
        other = mask.complement()
        assert 0 < mask.count < 63
        assert mask.count + other.count == 63
        assert not (mask.cells & other.cells).any()
        assert (mask.cells | other.cells).all()

    def test_empty_extent(self):
        assert GridMask.empty(3, 3).extent() is None


class TestSlidingBoxes:

    def test_offsets_in_range_and_on_grid(self):
        rng = np.random.default_rng(0)
        box = BoundingBox(0.25, 0.25, 0.75, 0.75)
        main = rasterize_mask(box, 16, 16)
        sliding = sample_sliding_boxes(box, 50, 16, 16, rng)
        assert len(sliding) == 50
        assert not sliding.degenerate
        for (dx, dy), mask in zip(sliding.offsets, sliding):
            assert (dx, dy) != (0, 0)
            # 10-20% of 16 cells is 1.6-3.2, which rounds to 2 or 3
            assert abs(dx) in (2, 3) and abs(dy) in (2, 3)
            assert mask.count == main.count

    def test_box_at_border_moves_inward(self):
        rng = np.random.default_rng(3)
        box = BoundingBox(0.0, 0.0, 0.5, 0.5)
        for dx, dy in sample_sliding_boxes(box, 20, 16, 16, rng).offsets:
            assert dx >= 0 and dy >= 0
            assert (dx, dy) != (0, 0)

    def test_full_grid_box_is_degenerate(self):
        rng = np.random.default_rng(0)
        box = BoundingBox(0.0, 0.0, 1.0, 1.0)
        sliding = sample_sliding_boxes(box, 3, 8, 8, rng)
        assert sliding.degenerate
        assert all(mask == rasterize_mask(box, 8, 8) for mask in sliding)

    def test_same_seed_same_boxes(self):
        box = BoundingBox(0.2, 0.3, 0.6, 0.7)
        a = sample_sliding_boxes(box, 4, 16, 16, np.random.default_rng(11))
        b = sample_sliding_boxes(box, 4, 16, 16, np.random.default_rng(11))
        assert a.offsets == b.offsets

    def test_needs_at_least_one(self):
        with pytest.raises(ContractViolation):
            sample_sliding_boxes(BoundingBox(0.2, 0.2, 0.6, 0.6), 0, 8, 8, np.random.default_rng(0))


def test_layout_spec_rejects_too_many_roles():
    with pytest.raises(LayoutValidationError):
        LayoutSpec(
            prompt_tokens=("ball",),
            objects=(LayoutObject(0, BoundingBox(0.1, 0.1, 0.5, 0.5)),),
            attributes=(LayoutAttribute(0, 0),),
        )
