import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hopseg.errors import InvalidShapeError, InvalidSpecError, MetadataError
from hopseg.volume import (NeighborhoodSpec, Volume4D, clahe,
                           gather_neighborhoods, max_pool, median_filter_2d,
                           pad_to_multiple, resample_lanczos,
                           resize_trilinear, resize_trilinear_centers)


def _reflect_index(i: int, n: int) -> int:
    if n == 1:
        return 0
    while i < 0 or i >= n:
        if i < 0:
            i = -i
        if i >= n:
            i = 2 * (n - 1) - i
    return i


def gather_oracle(vol: Volume4D, spec: NeighborhoodSpec) -> np.ndarray:
    """Naive per-voxel loop oracle for neighborhood gathering."""
    h, w, c, k = vol.shape
    radii = [s // 2 for s in spec.size]
    rows = []
    for ih in range(0, h, spec.stride[0]):
        for iw in range(0, w, spec.stride[1]):
            for ic in range(0, c, spec.stride[2]):
                row = []
                for dh in range(-radii[0], radii[0] + 1):
                    for dw in range(-radii[1], radii[1] + 1):
                        for dc in range(-radii[2], radii[2] + 1):
                            hh, ww, cc = ih + dh, iw + dw, ic + dc
                            inside = 0 <= hh < h and 0 <= ww < w and 0 <= cc < c
                            if inside:
                                row.extend(vol.data[hh, ww, cc, :])
                            elif spec.padding == "zero":
                                row.extend([0.0] * k)
                            else:
                                row.extend(vol.data[_reflect_index(hh, h),
                                                    _reflect_index(ww, w),
                                                    _reflect_index(cc, c), :])
                rows.append(row)
    return np.array(rows, dtype=np.float32)


class TestVolume4D:
    def test_flat_length_matches_shape(self):
        v = Volume4D(np.zeros((2, 3, 4, 5), np.float32))
        assert v.data.size == 2 * 3 * 4 * 5
        assert v.shape == (2, 3, 4, 5)

    def test_rejects_nan(self):
        data = np.zeros((2, 2, 2, 1), np.float32)
        data[0, 0, 0, 0] = np.nan
        with pytest.raises(InvalidShapeError):
            Volume4D(data)

    def test_rejects_bad_spacing(self):
        with pytest.raises(MetadataError):
            Volume4D(np.zeros((2, 2, 2, 1), np.float32), spacing=(1.0, 0.0, 1.0))

    def test_wraps_3d_as_single_channel(self):
        v = Volume4D(np.zeros((2, 2, 2), np.float32))
        assert v.shape == (2, 2, 2, 1)


class TestGatherNeighborhoods:
    def test_constant_1x1x1_reflect(self):
        v = Volume4D(np.full((1, 1, 1, 1), 5.0, np.float32))
        rows = gather_neighborhoods(v, NeighborhoodSpec((3, 3, 3)))
        assert rows.shape == (1, 27)
        assert np.all(rows == 5.0)

    def test_center_row_is_flat_volume(self):
        v = Volume4D(np.arange(27, dtype=np.float32).reshape(3, 3, 3, 1))
        rows = gather_neighborhoods(v, NeighborhoodSpec((3, 3, 3), padding="zero"))
        assert np.array_equal(rows[13], np.arange(27, dtype=np.float32))

    def test_identity_gather(self):
        rng = np.random.default_rng(0)
        v = Volume4D(rng.random((4, 3, 2, 5)).astype(np.float32))
        rows = gather_neighborhoods(v, NeighborhoodSpec((1, 1, 1)))
        assert np.array_equal(rows, v.data.reshape(-1, 5))

    @pytest.mark.parametrize("padding", ["reflect", "zero"])
    @pytest.mark.parametrize("stride", [(1, 1, 1), (2, 1, 3), (2, 2, 2)])
    def test_matches_loop_oracle(self, padding, stride):
        rng = np.random.default_rng(7)
        v = Volume4D(rng.random((5, 4, 6, 2)).astype(np.float32))
        spec = NeighborhoodSpec((3, 3, 3), stride, padding)
        got = gather_neighborhoods(v, spec)
        assert np.array_equal(got, gather_oracle(v, spec))

    def test_row_count(self):
        v = Volume4D(np.zeros((5, 4, 7, 1), np.float32))
        rows = gather_neighborhoods(v, NeighborhoodSpec((3, 3, 3), (2, 2, 3)))
        assert rows.shape[0] == 3 * 2 * 3  # ceil(5/2), ceil(4/2), ceil(7/3)

    def test_even_size_rejected(self):
        with pytest.raises(InvalidSpecError):
            NeighborhoodSpec((2, 3, 3))

    def test_oversized_window_rejected(self):
        v = Volume4D(np.zeros((1, 1, 1, 1), np.float32))
        with pytest.raises(InvalidSpecError):
            gather_neighborhoods(v, NeighborhoodSpec((5, 3, 3)))


class TestMaxPool:
    def test_enumeration_block(self):
        v = Volume4D(np.arange(1, 9, dtype=np.float32).reshape(2, 2, 2, 1))
        out = max_pool(v)
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 8.0

    def test_constant(self):
        v = Volume4D(np.full((4, 6, 2, 3), 2.5, np.float32))
        out = max_pool(v)
        assert out.shape == (2, 3, 1, 3)
        assert np.all(out.data == 2.5)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        v = Volume4D(rng.random((4, 4, 4, 2)).astype(np.float32))
        out = max_pool(v)
        expect = np.empty((2, 2, 2, 2), np.float32)
        for i in range(2):
            for j in range(2):
                for k in range(2):
                    block = v.data[2 * i:2 * i + 2, 2 * j:2 * j + 2, 2 * k:2 * k + 2]
                    expect[i, j, k] = block.max(axis=(0, 1, 2))
        assert np.array_equal(out.data, expect)

    def test_trailing_odd_dropped(self):
        v = Volume4D(np.zeros((5, 4, 3, 1), np.float32))
        assert max_pool(v).shape == (2, 2, 1, 1)

    def test_small_dim_rejected(self):
        with pytest.raises(InvalidShapeError):
            max_pool(Volume4D(np.zeros((1, 4, 4, 1), np.float32)))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_output_within_channel_bounds(self, seed):
        rng = np.random.default_rng(seed)
        v = Volume4D(rng.normal(size=(4, 6, 2, 3)).astype(np.float32))
        out = max_pool(v)
        for ch in range(3):
            assert out.data[..., ch].max() <= v.data[..., ch].max()
            assert out.data[..., ch].min() >= v.data[..., ch].min()


class TestResizeTrilinear:
    def test_constant_any_target(self):
        v = Volume4D(np.full((3, 3, 3, 2), 1.25, np.float32))
        out = resize_trilinear(v, (7, 2, 5))
        assert out.shape == (7, 2, 5, 2)
        assert np.allclose(out.data, 1.25)

    def test_linear_ramp_2_to_5(self):
        v = Volume4D(np.array([0.0, 1.0], np.float32).reshape(2, 1, 1, 1))
        out = resize_trilinear(v, (5, 1, 1))
        assert np.allclose(out.data.ravel(), [0.0, 0.25, 0.5, 0.75, 1.0])

    def test_identity(self):
        rng = np.random.default_rng(1)
        v = Volume4D(rng.random((4, 5, 6, 2)).astype(np.float32))
        out = resize_trilinear(v, (4, 5, 6))
        assert np.array_equal(out.data, v.data)

    def test_exact_on_affine_volumes(self):
        h, w, c = 5, 6, 7
        hh, ww, cc = np.meshgrid(np.arange(h), np.arange(w), np.arange(c),
                                 indexing="ij")
        affine = 0.3 + 0.11 * hh + 0.07 * ww - 0.05 * cc
        v = Volume4D(affine.astype(np.float32))
        out = resize_trilinear(v, (9, 11, 13))
        oh, ow, oc = np.meshgrid(np.arange(9) * (h - 1) / 8.0,
                                 np.arange(11) * (w - 1) / 10.0,
                                 np.arange(13) * (c - 1) / 12.0, indexing="ij")
        expect = 0.3 + 0.11 * oh + 0.07 * ow - 0.05 * oc
        assert np.abs(out.data[..., 0] - expect).max() < 1e-5

    def test_simplex_preserved(self):
        rng = np.random.default_rng(5)
        raw = rng.random((4, 4, 4, 3))
        soft = raw / raw.sum(axis=3, keepdims=True)
        out = resize_trilinear(Volume4D(soft.astype(np.float32)), (7, 3, 9))
        assert np.abs(out.data.sum(axis=3) - 1.0).max() < 1e-6

    def test_center_alignment_downsample(self):
        # 2-voxel axis with classes (0, 1) collapsed to one voxel: (0.5, 0.5)
        onehot = np.zeros((2, 1, 1, 2), np.float32)
        onehot[0, 0, 0, 0] = 1.0
        onehot[1, 0, 0, 1] = 1.0
        out = resize_trilinear_centers(Volume4D(onehot), (1, 1, 1))
        assert np.allclose(out.data.ravel(), [0.5, 0.5])

    def test_center_alignment_samples_block_centers(self):
        # 8 -> 2 half-pixel sampling reads coordinates 1.5 and 5.5
        v = Volume4D(np.arange(8, dtype=np.float32).reshape(8, 1, 1, 1))
        out = resize_trilinear_centers(v, (2, 1, 1))
        assert np.allclose(out.data.ravel(), [1.5, 5.5])


class TestResampleLanczos:
    def test_unit_factor_is_identity(self):
        rng = np.random.default_rng(2)
        v = Volume4D(rng.random((8, 8, 4, 1)).astype(np.float32),
                     spacing=(0.625, 0.625, 1.5))
        out = resample_lanczos(v, (0.625, 0.625, 1.5))
        assert out.shape == v.shape
        assert np.abs(out.data - v.data).max() < 1e-5

    def test_shape_arithmetic(self):
        v = Volume4D(np.zeros((100, 100, 20), np.float32), spacing=(0.5, 0.5, 3.0))
        out = resample_lanczos(v, (0.625, 0.625, 1.5))
        assert out.spatial_shape == (80, 80, 40)
        assert out.spacing == (0.625, 0.625, 1.5)

    def test_constant_preserved(self):
        v = Volume4D(np.full((10, 12, 8, 1), 0.7, np.float32),
                     spacing=(1.0, 0.8, 2.0))
        out = resample_lanczos(v, (0.625, 0.625, 1.5))
        assert np.abs(out.data - 0.7).max() < 1e-5

    def test_missing_spacing(self):
        with pytest.raises(MetadataError):
            resample_lanczos(Volume4D(np.zeros((4, 4, 4, 1), np.float32)),
                             (0.625, 0.625, 1.5))


class TestMedianFilter:
    def test_constant_map_unchanged(self):
        labels = np.full((10, 10, 3), 2, np.int32)
        assert np.array_equal(median_filter_2d(labels), labels)

    def test_isolated_pixel_removed(self):
        labels = np.zeros((15, 15, 1), np.int32)
        labels[7, 7, 0] = 1
        assert np.all(median_filter_2d(labels) == 0)

    def test_solid_block_unchanged(self):
        labels = np.ones((15, 15, 2), np.int32)
        assert np.array_equal(median_filter_2d(labels), labels)

    def test_never_introduces_new_label(self):
        rng = np.random.default_rng(9)
        labels = rng.integers(0, 4, size=(12, 12, 2)).astype(np.int32)
        labels[labels == 2] = 3  # label 2 absent from the input
        out = median_filter_2d(labels)
        assert set(np.unique(out)) <= set(np.unique(labels))

    def test_idempotent_on_constant(self):
        labels = np.full((9, 9, 1), 5, np.int32)
        once = median_filter_2d(labels)
        assert np.array_equal(median_filter_2d(once), once)

    def test_slices_independent(self):
        rng = np.random.default_rng(4)
        labels = rng.integers(0, 3, size=(11, 11, 3)).astype(np.int32)
        full = median_filter_2d(labels)
        for c in range(3):
            single = median_filter_2d(labels[:, :, c:c + 1])
            assert np.array_equal(full[:, :, c], single[:, :, 0])


class TestClahe:
    def test_constant_image(self):
        img = np.full((32, 32), 0.4)
        out = clahe(img)
        assert np.allclose(out, out.flat[0])
        assert 0.0 <= out.min() and out.max() <= 1.0

    def test_two_level_equalization_stretches(self):
        img = np.full((32, 32), 0.2)
        img[:, 16:] = 0.8
        out = clahe(img, clip_limit=1e9, tiles=(1, 1))
        lo, hi = out.min(), out.max()
        # global 2-bin equalization maps the levels to 0 and 1 exactly
        assert lo == pytest.approx(0.0, abs=1e-9)
        assert hi == pytest.approx(1.0, abs=1e-9)
        assert hi - lo > 0.6

    def test_output_range(self):
        rng = np.random.default_rng(6)
        out = clahe(rng.random((40, 40)))
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_deterministic(self):
        rng = np.random.default_rng(8)
        img = rng.random((33, 37))
        assert np.array_equal(clahe(img), clahe(img))


class TestPadToMultiple:
    def test_pads_and_records(self):
        data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
        padded, pads = pad_to_multiple(data, 4, axes=(0, 1, 2))
        assert padded.shape == (4, 4, 4)
        assert pads == (2, 1, 0)
        assert np.array_equal(padded[:2, :3, :4], data)

    def test_noop_when_aligned(self):
        data = np.zeros((8, 8, 8), np.float32)
        padded, pads = pad_to_multiple(data, 8, axes=(0, 1, 2))
        assert pads == (0, 0, 0)
        assert padded.shape == (8, 8, 8)
