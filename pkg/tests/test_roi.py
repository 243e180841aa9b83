import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from apamnet.roi import (
    ExternalMapSegmenter,
    OtsuLungSegmenter,
    RoiParams,
    binarize,
    convex_hull_fill,
    dilate,
    generate_roi_mask,
    keep_largest_islands,
    refine_mask,
)
from oracles import flood_fill_components, hull_fill_reference

small_masks = arrays(np.uint8, (12, 12), elements=st.integers(0, 1))


class TestBinarize:
    def test_threshold_is_inclusive(self):
        soft = np.array([[0.49, 0.5], [0.51, 1.0]])
        assert binarize(soft, 0.5).tolist() == [[0, 1], [1, 1]]

    def test_custom_threshold(self):
        soft = np.array([[0.2, 0.8]])
        assert binarize(soft, 0.9).tolist() == [[0, 0]]


class TestKeepIslands:
    def test_keeps_two_largest(self):
        mask = np.zeros((10, 10), dtype=np.uint8)
        mask[0:4, 0:4] = 1  # 16 px
        mask[6:9, 6:9] = 1  # 9 px
        mask[0, 9] = 1  # 1 px, must go
        out = keep_largest_islands(mask, 2)
        assert out.sum() == 25
        assert out[0, 9] == 0

    def test_diagonal_pixels_are_one_island(self):
        mask = np.zeros((6, 6), dtype=np.uint8)
        mask[1, 1] = mask[2, 2] = mask[3, 3] = 1
        mask[5, 0] = 1
        out = keep_largest_islands(mask, 1)
        assert out.sum() == 3  # the diagonal chain counts as one component

    @given(mask=small_masks)
    @settings(max_examples=40, deadline=None)
    def test_result_components_subset_of_input(self, mask):
        out = keep_largest_islands(mask, 2)
        assert not np.any(out & ~mask.astype(bool))
        assert len(flood_fill_components(out)) <= 2

    @given(mask=small_masks, k=st.integers(1, 3))
    @settings(max_examples=30, deadline=None)
    def test_kept_areas_are_the_largest(self, mask, k):
        comps = sorted((len(c) for c in flood_fill_components(mask)), reverse=True)
        out = keep_largest_islands(mask, k)
        assert int(out.sum()) == sum(comps[:k])


class TestConvexHullFill:
    def test_empty_mask_stays_empty(self):
        assert convex_hull_fill(np.zeros((5, 5), dtype=np.uint8)).sum() == 0

    def test_single_pixel(self):
        mask = np.zeros((5, 5), dtype=np.uint8)
        mask[2, 3] = 1
        assert np.array_equal(convex_hull_fill(mask), mask)

    def test_two_pixels_fill_the_segment(self):
        mask = np.zeros((5, 5), dtype=np.uint8)
        mask[1, 1] = mask[3, 3] = 1
        out = convex_hull_fill(mask)
        assert out[1, 1] and out[2, 2] and out[3, 3]
        assert out.sum() == 3

    def test_triangle_interior_filled(self):
        mask = np.zeros((10, 10), dtype=np.uint8)
        mask[1, 1] = mask[1, 8] = mask[8, 1] = 1
        out = convex_hull_fill(mask)
        assert out[2, 2] == 1  # strictly inside
        assert out[8, 8] == 0  # outside the hypotenuse

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            mask = (rng.random((15, 15)) < 0.2).astype(np.uint8)
            once = convex_hull_fill(mask)
            assert np.array_equal(convex_hull_fill(once), once)

    @given(mask=small_masks)
    @settings(max_examples=50, deadline=None)
    def test_matches_point_in_hull_reference(self, mask):
        assert np.array_equal(convex_hull_fill(mask), hull_fill_reference(mask))


class TestDilate:
    def test_radius_zero_is_identity(self):
        mask = (np.random.default_rng(1).random((8, 8)) < 0.3).astype(np.uint8)
        assert np.array_equal(dilate(mask, 0), mask)

    def test_single_pixel_becomes_disc(self):
        mask = np.zeros((11, 11), dtype=np.uint8)
        mask[5, 5] = 1
        out = dilate(mask, 2)
        ys, xs = np.nonzero(out)
        assert all((y - 5) ** 2 + (x - 5) ** 2 <= 4 for y, x in zip(ys, xs))
        assert out.sum() == sum(
            1
            for dy in range(-2, 3)
            for dx in range(-2, 3)
            if dy * dy + dx * dx <= 4
        )

    def test_negative_radius_is_an_error(self):
        with pytest.raises(ValueError):
            dilate(np.zeros((3, 3), dtype=np.uint8), -1)


class TestRefineChain:
    def test_full_chain_on_two_blobs(self):
        soft = np.zeros((40, 40), dtype=np.float32)
        soft[5:15, 5:12] = 0.9
        soft[5:15, 25:32] = 0.9
        soft[30, 30] = 0.8  # stray speck, dropped by island filter
        out = refine_mask(soft, RoiParams(dilation_radius=2))
        assert out.dtype == np.uint8
        assert set(np.unique(out)) <= {0, 1}
        # hull closes the gap between the blobs
        assert out[10, 18] == 1
        # dilation grows the footprint beyond the raw blobs
        assert out[4, 8] == 1

    def test_monotone_steps(self):
        # each stage after the island filter can only add pixels
        soft = (np.random.default_rng(2).random((30, 30)) > 0.7).astype(np.float32)
        params = RoiParams(dilation_radius=3)
        kept = keep_largest_islands(binarize(soft, params.threshold), params.keep_islands)
        hull = convex_hull_fill(kept)
        out = dilate(hull, params.dilation_radius)
        assert np.all(hull >= kept)
        assert np.all(out >= hull)
        assert np.array_equal(out, refine_mask(soft, params))


class TestSegmenters:
    def test_otsu_picks_dark_regions(self):
        img = np.full((64, 64), 0.8, dtype=np.float32)
        img[20:40, 10:30] = 0.2
        soft = OtsuLungSegmenter().segment(img)
        assert soft[30, 20] == 1.0
        assert soft[5, 5] == 0.0

    def test_external_reads_by_image_id(self, tmp_path):
        from PIL import Image

        arr = np.zeros((32, 32), dtype=np.uint8)
        arr[8:24, 8:24] = 255
        Image.fromarray(arr, mode="L").save(tmp_path / "x.png")
        seg = ExternalMapSegmenter(tmp_path)
        out = seg.segment(np.zeros((32, 32), dtype=np.float32), image_id="x.png")
        assert out[16, 16] == 1.0

    def test_external_missing_id_is_an_error(self, tmp_path):
        seg = ExternalMapSegmenter(tmp_path)
        with pytest.raises(FileNotFoundError, match="y.png"):
            seg.segment(np.zeros((8, 8), dtype=np.float32), image_id="y.png")


class TestGenerateRoiMask:
    def test_output_matches_source_resolution(self):
        img = np.full((300, 400), 0.8, dtype=np.float32)
        img[100:200, 60:160] = 0.2
        img[100:200, 240:340] = 0.2
        result = generate_roi_mask(img, OtsuLungSegmenter(), RoiParams())
        assert result.mask.shape == (300, 400)
        assert result.provenance == "fallback"
        assert set(np.unique(result.mask)) <= {0, 1}
        # both lungs and the gap between them are inside
        assert result.mask[150, 110] == 1
        assert result.mask[150, 200] == 1
        assert result.mask[10, 10] == 0
