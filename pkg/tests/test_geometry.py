import json

import numpy as np
import pytest

from refground.geometry import (
    BinaryMask,
    Box,
    DegenerateRegionError,
    EmptyMaskError,
    MaskRegion,
    OutOfBoundsError,
    Point,
    Polygon,
    Scribble,
    SizeMismatchError,
    bounding_box,
    iou,
    mask_from_json,
    mask_to_json,
    rasterize,
    region_from_json,
    region_to_json,
    rle_decode,
    rle_encode,
)

import oracles


def random_box(rng, width, height):
    x = np.sort(rng.uniform(0, width, 2))
    y = np.sort(rng.uniform(0, height, 2))
    return Box(x[0], y[0], x[1], y[1])


class TestRasterize:
    def test_full_image_box_is_all_ones(self):
        mask = rasterize(Box(0, 0, 17, 11), (17, 11))
        assert mask.popcount == 17 * 11

    def test_point_disk_popcount_matches_brute_force(self):
        mask = rasterize(Point(10, 10), (100, 100))
        assert mask.popcount == oracles.disk_popcount(10, 10, 5.0, 100, 100)

    @pytest.mark.parametrize("radius", [0.5, 2.0, 5.0, 7.25])
    def test_disk_popcount_other_radii(self, radius):
        mask = rasterize(Point(31.3, 18.7, radius), (64, 64))
        assert mask.popcount == oracles.disk_popcount(31.3, 18.7, radius, 64, 64)

    def test_polygon_square_equals_box(self):
        square = Polygon(((2, 2), (8, 2), (8, 8), (2, 8)))
        assert rasterize(square, (10, 10)) == rasterize(Box(2, 2, 8, 8), (10, 10))

    def test_polygon_matches_point_in_polygon_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(25):
            n_vertices = int(rng.integers(3, 9))
            vertices = tuple(
                (float(rng.uniform(0, 40)), float(rng.uniform(0, 40)))
                for _ in range(n_vertices)
            )
            mask = rasterize(Polygon(vertices), (40, 40))
            expected = oracles.polygon_fill(vertices, 40, 40)
            np.testing.assert_array_equal(mask.data, expected)

    def test_self_intersecting_polygon_even_odd(self):
        # Bowtie: the crossing region is filled on both wings, per even-odd.
        bowtie = ((0, 0), (20, 20), (20, 0), (0, 20))
        mask = rasterize(Polygon(bowtie), (20, 20))
        expected = oracles.polygon_fill(bowtie, 20, 20)
        np.testing.assert_array_equal(mask.data, expected)

    def test_mask_variant_is_identity(self):
        rng = np.random.default_rng(3)
        grid = rng.random((12, 9)) < 0.4
        region = MaskRegion(BinaryMask(grid))
        assert rasterize(region, (9, 12)) == BinaryMask(grid)

    def test_mask_variant_size_mismatch(self):
        region = MaskRegion(BinaryMask(np.ones((4, 4), bool)))
        with pytest.raises(SizeMismatchError):
            rasterize(region, (5, 4))

    def test_out_of_bounds_is_an_error(self):
        with pytest.raises(OutOfBoundsError):
            rasterize(Box(0, 0, 10.001, 5), (10, 10))
        with pytest.raises(OutOfBoundsError):
            rasterize(Point(-0.1, 5), (10, 10))
        with pytest.raises(OutOfBoundsError):
            rasterize(Polygon(((0, 0), (4, 0), (4, 11))), (10, 10))

    def test_polygon_needs_three_vertices(self):
        with pytest.raises(DegenerateRegionError):
            Polygon(((0, 0), (1, 1)))

    def test_zero_area_box_marks_corner_pixel(self):
        mask = rasterize(Box(3.2, 4.7, 3.2, 4.7), (10, 10))
        assert mask.popcount == 1
        assert mask.data[4, 3]

    def test_zero_area_box_at_image_edge(self):
        mask = rasterize(Box(10, 10, 10, 10), (10, 10))
        assert mask.popcount == 1
        assert mask.data[9, 9]

    def test_scribble_single_point_stroke(self):
        mask = rasterize(Scribble((((5.0, 5.0),),), stroke_width=3.0), (10, 10))
        assert mask.popcount == oracles.disk_popcount(5, 5, 1.5, 10, 10)

    def test_scribble_horizontal_stroke_width(self):
        mask = rasterize(Scribble((((2.0, 5.0), (8.0, 5.0)),), 3.0), (10, 10))
        # Centers at y=4.5 and 5.5 are within 1.5 of the stroke line y=5.
        assert mask.data[4, 5] and mask.data[5, 5]
        assert not mask.data[2, 5] and not mask.data[7, 5]

    def test_rasterize_contained_in_bounding_box_raster(self):
        # bounding_box returns pixel indices; its pixel hull spans one more
        # unit than the max index.
        rng = np.random.default_rng(7)
        for _ in range(20):
            n_vertices = int(rng.integers(3, 7))
            vertices = tuple(
                (float(rng.uniform(1, 30)), float(rng.uniform(1, 30)))
                for _ in range(n_vertices)
            )
            region = Polygon(vertices)
            mask = rasterize(region, (32, 32))
            if mask.popcount == 0:
                continue
            bbox = bounding_box(mask)
            hull = Box(bbox.x_min, bbox.y_min, bbox.x_max + 1, bbox.y_max + 1)
            box_mask = rasterize(hull, (32, 32))
            assert not np.any(mask.data & ~box_mask.data)


class TestBoundingBox:
    def test_all_ones(self):
        assert bounding_box(BinaryMask(np.ones((4, 4), bool))).as_tuple() == (
            0.0,
            0.0,
            3.0,
            3.0,
        )

    def test_single_pixel(self):
        grid = np.zeros((8, 8), bool)
        grid[5, 2] = True
        assert bounding_box(BinaryMask(grid)).as_tuple() == (2.0, 5.0, 2.0, 5.0)

    def test_two_pixels(self):
        grid = np.zeros((8, 8), bool)
        grid[1, 1] = True
        grid[3, 7] = True
        assert bounding_box(BinaryMask(grid)).as_tuple() == (1.0, 1.0, 7.0, 3.0)

    def test_empty_mask(self):
        with pytest.raises(EmptyMaskError):
            bounding_box(BinaryMask(np.zeros((4, 4), bool)))


class TestIou:
    def test_identical(self):
        box = Box(2, 3, 10, 12)
        assert iou(box, box) == 1.0

    def test_disjoint(self):
        assert iou(Box(0, 0, 1, 1), Box(2, 2, 3, 3)) == 0.0

    def test_third(self):
        assert iou(Box(0, 0, 2, 2), Box(1, 0, 3, 2)) == pytest.approx(1 / 3)

    def test_zero_area_rules(self):
        point_box = Box(5, 5, 5, 5)
        assert iou(point_box, point_box) == 1.0
        assert iou(point_box, Box(6, 6, 6, 6)) == 0.0
        assert iou(point_box, Box(0, 0, 10, 10)) == 0.0

    def test_random_pairs_properties(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            a = random_box(rng, 50, 50)
            b = random_box(rng, 50, 50)
            v = iou(a, b)
            assert 0.0 <= v <= 1.0
            assert v == iou(b, a)
            assert v == pytest.approx(oracles.iou_ref(a.as_tuple(), b.as_tuple()))

    def test_box_ordering_enforced(self):
        with pytest.raises(DegenerateRegionError):
            Box(5, 0, 4, 2)


class TestSerialization:
    def test_rle_round_trip(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            grid = rng.random((int(rng.integers(1, 30)), int(rng.integers(1, 30)))) < 0.3
            mask = BinaryMask(grid)
            assert rle_decode(rle_encode(mask), mask.width, mask.height) == mask

    def test_mask_json_round_trip(self):
        grid = np.eye(6, dtype=bool)
        mask = BinaryMask(grid)
        blob = json.dumps(mask_to_json(mask))
        assert mask_from_json(json.loads(blob)) == mask

    @pytest.mark.parametrize(
        "region",
        [
            Point(3, 4),
            Point(3, 4, radius=2.5),
            Box(1, 2, 3, 4),
            Polygon(((0, 0), (5, 0), (3, 4))),
            Scribble((((1, 1), (2, 3)), ((4, 4),)), 2.0),
            MaskRegion(BinaryMask(np.eye(6, dtype=bool))),
        ],
    )
    def test_region_json_round_trip(self, region):
        restored = region_from_json(json.loads(json.dumps(region_to_json(region))))
        assert rasterize(restored, (6, 6)) == rasterize(region, (6, 6))

    def test_unknown_region_type(self):
        with pytest.raises(ValueError):
            region_from_json({"type": "blob"})

    def test_masks_are_immutable(self):
        mask = rasterize(Box(0, 0, 4, 4), (4, 4))
        with pytest.raises(ValueError):
            mask.data[0, 0] = False
