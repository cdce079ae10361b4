import numpy as np
import pytest

from refground.featmap import (
    FeatureMap,
    OutOfRangeError,
    bilinear,
    bilinear_grad_xy,
    featmap_coords_from_normalized,
    load_fmap,
    mask_to_featmap_coords,
    save_fmap,
    synth_feature_map,
)

import oracles


def random_map(rng, h=7, w=9, c=3):
    return FeatureMap(rng.uniform(-2, 2, size=(h, w, c)))


class TestBilinear:
    def test_integer_coordinates_return_stored_values(self):
        rng = np.random.default_rng(0)
        fmap = random_map(rng)
        for y in range(fmap.height):
            for x in range(fmap.width):
                np.testing.assert_array_equal(bilinear(fmap, x, y), fmap.data[y, x])

    def test_constant_map_everywhere_constant(self):
        fmap = synth_feature_map(5, 5, 2, "constant")
        rng = np.random.default_rng(1)
        for _ in range(50):
            v = bilinear(fmap, rng.uniform(0, 4), rng.uniform(0, 4))
            np.testing.assert_allclose(v, 1.0)

    def test_two_by_two_center(self):
        fmap = FeatureMap(np.array([[[0.0], [1.0]], [[2.0], [3.0]]]))
        assert bilinear(fmap, 0.5, 0.5)[0] == pytest.approx(1.5)

    def test_matches_lerp_oracle(self):
        rng = np.random.default_rng(2)
        fmap = random_map(rng)
        for _ in range(300):
            x = rng.uniform(0, fmap.width - 1)
            y = rng.uniform(0, fmap.height - 1)
            np.testing.assert_allclose(
                bilinear(fmap, x, y),
                oracles.bilinear_ref(fmap.data, x, y),
                rtol=1e-12,
                atol=1e-12,
            )

    def test_output_within_neighbor_range(self):
        rng = np.random.default_rng(3)
        fmap = random_map(rng)
        for _ in range(200):
            x = rng.uniform(0, fmap.width - 1)
            y = rng.uniform(0, fmap.height - 1)
            x0, y0 = int(x), int(y)
            x1, y1 = min(x0 + 1, fmap.width - 1), min(y0 + 1, fmap.height - 1)
            corners = fmap.data[[y0, y0, y1, y1], [x0, x1, x0, x1]]
            v = bilinear(fmap, x, y)
            assert np.all(v >= corners.min(axis=0) - 1e-12)
            assert np.all(v <= corners.max(axis=0) + 1e-12)

    def test_continuity(self):
        rng = np.random.default_rng(4)
        fmap = random_map(rng)
        lipschitz = np.abs(np.diff(fmap.data, axis=0)).max() + np.abs(
            np.diff(fmap.data, axis=1)
        ).max()
        eps = 1e-6
        for _ in range(200):
            x = rng.uniform(0, fmap.width - 1 - eps)
            y = rng.uniform(0, fmap.height - 1 - eps)
            step = np.abs(bilinear(fmap, x + eps, y) - bilinear(fmap, x, y)).max()
            assert step <= (lipschitz + 1.0) * eps

    def test_grad_matches_central_differences(self):
        rng = np.random.default_rng(5)
        fmap = random_map(rng)
        h = 1e-6
        checked = 0
        while checked < 200:
            x = rng.uniform(0.1, fmap.width - 1.1)
            y = rng.uniform(0.1, fmap.height - 1.1)
            # Stay away from integer lattice lines where the blend has kinks.
            if min(x % 1, 1 - x % 1, y % 1, 1 - y % 1) < 10 * h:
                continue
            checked += 1
            dx, dy = bilinear_grad_xy(fmap, x, y)
            fd_x = (bilinear(fmap, x + h, y) - bilinear(fmap, x - h, y)) / (2 * h)
            fd_y = (bilinear(fmap, x, y + h) - bilinear(fmap, x, y - h)) / (2 * h)
            np.testing.assert_allclose(dx, fd_x, rtol=1e-5, atol=1e-8)
            np.testing.assert_allclose(dy, fd_y, rtol=1e-5, atol=1e-8)

    def test_out_of_range(self):
        fmap = synth_feature_map(4, 4, 1, "constant")
        with pytest.raises(OutOfRangeError):
            bilinear(fmap, 3.001, 0)
        with pytest.raises(OutOfRangeError):
            bilinear(fmap, 0, -0.001)


class TestCoordinateRescale:
    def test_edge_pixel_clamps(self):
        fmap = synth_feature_map(24, 24, 1, "constant")
        gx, gy = mask_to_featmap_coords(0, 0, (336, 336), fmap)
        assert (gx, gy) == (0.0, 0.0)

    def test_identity_when_sizes_match(self):
        fmap = synth_feature_map(16, 16, 1, "constant")
        for p in (0, 5, 15):
            gx, gy = mask_to_featmap_coords(p, p, (16, 16), fmap)
            assert gx == pytest.approx(p)
            assert gy == pytest.approx(p)

    def test_center_maps_to_center(self):
        fmap = synth_feature_map(11, 11, 1, "constant")
        gx, gy = mask_to_featmap_coords(50, 50, (101, 101), fmap)
        assert gx == pytest.approx(5.0)
        assert gy == pytest.approx(5.0)

    def test_normalized_variant_agrees(self):
        fmap = synth_feature_map(8, 12, 1, "constant")
        for px, py in ((0, 0), (7, 3), (63, 31)):
            a = mask_to_featmap_coords(px, py, (64, 32), fmap)
            b = featmap_coords_from_normalized((px + 0.5) / 64, (py + 0.5) / 32, fmap)
            assert a == pytest.approx(b)


class TestFmapFile:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(6)
        data = rng.uniform(-1, 1, size=(5, 7, 3)).astype(np.float32)
        fmap = FeatureMap(data)
        path = tmp_path / "z.fmap"
        save_fmap(path, fmap)
        loaded = load_fmap(path)
        np.testing.assert_array_equal(loaded.data, fmap.data)
        # Header is 3 little-endian int32 followed by float32 payload.
        raw = path.read_bytes()
        assert len(raw) == 12 + 4 * 5 * 7 * 3
        assert np.frombuffer(raw[:12], dtype="<i4").tolist() == [5, 7, 3]

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "bad.fmap"
        path.write_bytes(np.array([2, 2, 1], dtype="<i4").tobytes() + b"\x00" * 8)
        with pytest.raises(ValueError):
            load_fmap(path)

    def test_non_finite_rejected(self):
        data = np.zeros((2, 2, 1))
        data[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            FeatureMap(data)


class TestSynth:
    def test_patterns(self):
        ramp = synth_feature_map(3, 4, 2, "ramp-x")
        assert ramp.data[0, 3, 0] == 3.0
        ramp_y = synth_feature_map(3, 4, 2, "ramp-y")
        assert ramp_y.data[2, 0, 1] == 2.0
        with pytest.raises(ValueError):
            synth_feature_map(2, 2, 1, "swirl")

    def test_random_is_seeded(self):
        a = synth_feature_map(4, 4, 2, "random", seed=9)
        b = synth_feature_map(4, 4, 2, "random", seed=9)
        c = synth_feature_map(4, 4, 2, "random", seed=10)
        np.testing.assert_array_equal(a.data, b.data)
        assert not np.array_equal(a.data, c.data)
