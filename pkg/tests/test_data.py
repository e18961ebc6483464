"""Domain types, normalization, masks, resampling, phantoms, file I/O."""

import json
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from thoraxgen import (LUNG_AND_NODULE, NODULE_ONLY, PhantomConfig,
                       SemanticLayout, Volume, conditioning_channel_count,
                       derive_masks, generate_phantom, layout_to_channels,
                       load_layout, load_volume, normalize_intensity,
                       resample_cubic, save_layout, save_volume)
from thoraxgen.errors import (ConfigurationError, DimensionError, FormatError,
                              GenerationError, LabelDomainError)


class TestNormalize:
    def test_window_edges_map_to_unit_interval_ends(self):
        vol = normalize_intensity(np.array([[[-1000.0, 500.0]]]), (-1000, 500))
        assert vol.values[0, 0, 0] == -1.0
        assert vol.values[0, 0, 1] == 1.0

    def test_window_midpoint_maps_to_zero(self):
        vol = normalize_intensity(np.full((2, 2, 2), -250.0), (-1000, 500))
        assert np.allclose(vol.values, 0.0, atol=1e-7)

    def test_values_outside_window_are_clipped(self):
        vol = normalize_intensity(np.array([[[-5000.0, 5000.0]]]), (-1000, 500))
        assert vol.values[0, 0, 0] == -1.0
        assert vol.values[0, 0, 1] == 1.0

    def test_idempotent_on_already_normalized_volume(self):
        rng = np.random.default_rng(0)
        values = rng.uniform(-1, 1, (4, 4, 4))
        once = normalize_intensity(values, (-1, 1))
        twice = normalize_intensity(once.values, (-1, 1))
        assert np.max(np.abs(twice.values - once.values)) <= 1e-6

    def test_degenerate_window_rejected(self):
        with pytest.raises(ConfigurationError):
            normalize_intensity(np.zeros((2, 2, 2)), (5, 5))
        with pytest.raises(ConfigurationError):
            normalize_intensity(np.zeros((2, 2, 2)), (5, -5))


class TestMasks:
    def test_all_background(self):
        masks = derive_masks(SemanticLayout(np.zeros((2, 2, 2), np.uint8)))
        assert np.all(masks.m_lung == 0)
        assert np.all(masks.m_extra == 1)

    def test_all_lung(self):
        masks = derive_masks(SemanticLayout(np.ones((2, 2, 2), np.uint8)))
        assert np.all(masks.m_extra == 0)

    def test_mixed_elementwise_rule(self):
        layout = SemanticLayout(np.array([[[0, 2]]], np.uint8))
        masks = derive_masks(layout)
        assert masks.m_lung.tolist() == [[[0.0, 1.0]]]
        assert masks.m_extra.tolist() == [[[1.0, 0.0]]]

    def test_unknown_label_rejected_at_construction(self):
        with pytest.raises(LabelDomainError):
            SemanticLayout(np.array([[[0, 7]]], np.uint8))

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.integers(0, 2), min_size=8, max_size=8))
    def test_complementarity_property(self, flat):
        labels = np.array(flat, np.uint8).reshape(2, 2, 2)
        masks = derive_masks(SemanticLayout(labels))
        assert np.array_equal(masks.m_lung + masks.m_extra,
                              np.ones((2, 2, 2), np.float32))


class TestLayoutChannels:
    def test_all_background_gives_zero_channels(self):
        layout = SemanticLayout(np.zeros((2, 2, 2), np.uint8))
        assert np.all(layout_to_channels(layout, LUNG_AND_NODULE) == 0)

    def test_single_nodule_voxel(self):
        labels = np.zeros((2, 2, 2), np.uint8)
        labels[1, 0, 1] = 2
        chans = layout_to_channels(SemanticLayout(labels), LUNG_AND_NODULE)
        assert chans.shape == (2, 2, 2, 2)
        assert chans[1].sum() == 1 and chans[1][1, 0, 1] == 1
        assert chans[0].sum() == 0

    def test_channel_sums_match_label_counts(self):
        rng = np.random.default_rng(3)
        labels = rng.integers(0, 3, (6, 6, 6)).astype(np.uint8)
        chans = layout_to_channels(SemanticLayout(labels), LUNG_AND_NODULE)
        assert chans[0].sum() == (labels == 1).sum()
        assert chans[1].sum() == (labels == 2).sum()

    def test_nodule_only_mode_drops_lung_channel(self):
        labels = np.array([[[1, 2]]], np.uint8)
        chans = layout_to_channels(SemanticLayout(labels), NODULE_ONLY)
        assert chans.shape == (1, 1, 1, 2)
        assert chans[0].tolist() == [[[0.0, 1.0]]]

    def test_channel_counts(self):
        assert conditioning_channel_count(LUNG_AND_NODULE) == 2
        assert conditioning_channel_count(NODULE_ONLY) == 1
        with pytest.raises(ConfigurationError):
            conditioning_channel_count("voxelwise")

    def test_unknown_mode_rejected(self):
        layout = SemanticLayout(np.zeros((2, 2, 2), np.uint8))
        with pytest.raises(ConfigurationError):
            layout_to_channels(layout, "everything")


class TestResample:
    def test_identity_target_copies(self):
        vol = Volume(np.random.default_rng(0).uniform(-1, 1, (4, 4, 4)))
        out = resample_cubic(vol, 4)
        assert np.array_equal(out.values, vol.values)
        assert out.values is not vol.values

    def test_layout_identity_is_bitwise(self):
        labels = np.random.default_rng(0).integers(0, 3, (4, 4, 4)).astype(np.uint8)
        layout = SemanticLayout(labels)
        out = resample_cubic(layout, 4)
        assert np.array_equal(out.labels, labels)

    def test_constant_volume_resamples_to_same_constant(self):
        vol = Volume(np.full((8, 8, 8), 0.25, np.float32))
        out = resample_cubic(vol, 5)
        assert np.allclose(out.values, 0.25, atol=1e-6)

    def test_layout_label_set_preserved(self):
        labels = np.zeros((8, 8, 8), np.uint8)
        labels[2:6, 2:6, 2:6] = 1
        labels[3:5, 3:5, 3:5] = 2
        out = resample_cubic(SemanticLayout(labels), 5)
        assert set(np.unique(out.labels)) <= {0, 1, 2}
        assert out.labels.shape == (5, 5, 5)

    def test_spacing_rescaled(self):
        vol = Volume(np.zeros((8, 8, 8), np.float32), spacing_mm=(1.0, 2.0, 4.0))
        out = resample_cubic(vol, 4)
        assert out.spacing_mm == (2.0, 4.0, 8.0)

    def test_degenerate_target_rejected(self):
        with pytest.raises(ConfigurationError):
            resample_cubic(Volume(np.zeros((4, 4, 4), np.float32)), 1)

    def test_unsupported_object_rejected(self):
        with pytest.raises(ConfigurationError):
            resample_cubic(np.zeros((4, 4, 4)), 4)


class TestPhantom:
    def test_same_seed_is_bitwise_identical(self):
        a_vol, a_lay = generate_phantom(11)
        b_vol, b_lay = generate_phantom(11)
        assert np.array_equal(a_vol.values, b_vol.values)
        assert np.array_equal(a_lay.labels, b_lay.labels)

    def test_different_seeds_differ(self):
        a_vol, _ = generate_phantom(1)
        b_vol, _ = generate_phantom(2)
        assert not np.array_equal(a_vol.values, b_vol.values)

    def test_intensities_in_range(self):
        vol, _ = generate_phantom(5)
        assert vol.values.min() >= -1.0 and vol.values.max() <= 1.0

    def test_lung_labels_inside_lung_ellipsoids(self):
        cfg = PhantomConfig()
        _, layout = generate_phantom(3, cfg)
        n = cfg.resolution
        axis = (np.arange(n) + 0.5) / n * 2.0 - 1.0
        z, y, x = np.meshgrid(axis, axis, axis, indexing="ij")
        az, ay, ax_ = cfg.lung_axes
        inside = np.zeros((n, n, n), bool)
        for cx in (-cfg.lung_offset_x, cfg.lung_offset_x):
            inside |= ((z / az) ** 2 + (y / ay) ** 2
                       + ((x - cx) / ax_) ** 2) <= 1.0
        assert np.all(inside[layout.labels >= 1])

    def test_at_least_one_nodule(self):
        for seed in range(10):
            _, layout = generate_phantom(seed)
            assert (layout.labels == 2).sum() > 0

    def test_lungs_darker_than_body_wall(self):
        # Statistical oracle over many seeds: mean intensity inside the
        # lungs must sit below the mean of the body wall.
        for seed in range(100):
            vol, layout = generate_phantom(seed, PhantomConfig(resolution=16))
            lung = vol.values[layout.labels == 1]
            wall = vol.values[(layout.labels == 0) & (vol.values > -0.5)]
            assert lung.mean() < wall.mean()

    def test_too_small_resolution_rejected(self):
        with pytest.raises(ConfigurationError):
            generate_phantom(0, PhantomConfig(resolution=8))

    def test_impossible_geometry_rejected(self):
        with pytest.raises(GenerationError):
            generate_phantom(0, PhantomConfig(lung_offset_x=0.9))
        with pytest.raises(GenerationError):
            generate_phantom(0, PhantomConfig(nodule_radius_range=(0.2, 0.9)))


class TestFileIO:
    def test_volume_round_trip_bitwise(self, tmp_path):
        vol = Volume(np.random.default_rng(0).uniform(-1, 1, (4, 5, 6))
                     .astype(np.float32), spacing_mm=(1.0, 0.5, 0.25))
        base = save_volume(str(tmp_path / "vol"), vol)
        back = load_volume(base)
        assert np.array_equal(back.values, vol.values)
        assert back.spacing_mm == vol.spacing_mm

    def test_layout_round_trip_bitwise(self, tmp_path):
        labels = np.random.default_rng(0).integers(0, 3, (4, 4, 4)).astype(np.uint8)
        layout = SemanticLayout(labels)
        base = save_layout(str(tmp_path / "lay"), layout)
        back = load_layout(base)
        assert np.array_equal(back.labels, labels)

    def test_exact_byte_count_loads(self, tmp_path):
        base = str(tmp_path / "cube")
        header = {"shape": [2, 2, 2], "dtype": "f32",
                  "spacing_mm": [1, 1, 1], "order": "row-major, z slowest"}
        (tmp_path / "cube.json").write_text(json.dumps(header))
        (tmp_path / "cube.raw").write_bytes(b"\x00" * 32)
        vol = load_volume(base)
        assert vol.shape == (2, 2, 2)

    def test_short_blob_rejected(self, tmp_path):
        header = {"shape": [2, 2, 2], "dtype": "f32",
                  "spacing_mm": [1, 1, 1], "order": "row-major, z slowest"}
        (tmp_path / "cube.json").write_text(json.dumps(header))
        (tmp_path / "cube.raw").write_bytes(b"\x00" * 28)
        with pytest.raises(FormatError):
            load_volume(str(tmp_path / "cube"))

    def test_truncated_blob_rejected(self, tmp_path):
        vol = Volume(np.zeros((3, 3, 3), np.float32))
        base = save_volume(str(tmp_path / "vol"), vol)
        blob = (tmp_path / "vol.raw").read_bytes()
        (tmp_path / "vol.raw").write_bytes(blob[:-5])
        with pytest.raises(FormatError):
            load_volume(base)

    def test_missing_header_field_rejected(self, tmp_path):
        (tmp_path / "bad.json").write_text(json.dumps({"shape": [2, 2, 2]}))
        (tmp_path / "bad.raw").write_bytes(b"\x00" * 32)
        with pytest.raises(FormatError):
            load_volume(str(tmp_path / "bad"))

    def test_dtype_mismatch_rejected(self, tmp_path):
        layout = SemanticLayout(np.zeros((2, 2, 2), np.uint8))
        base = save_layout(str(tmp_path / "lay"), layout)
        with pytest.raises(FormatError):
            load_volume(base)

    def test_unsupported_dtype_rejected(self, tmp_path):
        header = {"shape": [2, 2, 2], "dtype": "f64",
                  "spacing_mm": [1, 1, 1], "order": "row-major, z slowest"}
        (tmp_path / "bad.json").write_text(json.dumps(header))
        (tmp_path / "bad.raw").write_bytes(b"\x00" * 64)
        with pytest.raises(FormatError):
            load_volume(str(tmp_path / "bad"))

    def test_missing_file_rejected_not_crash(self, tmp_path):
        with pytest.raises(FormatError):
            load_volume(str(tmp_path / "nothing"))

    def test_no_temp_files_left_behind(self, tmp_path):
        save_volume(str(tmp_path / "vol"), Volume(np.zeros((2, 2, 2), np.float32)))
        leftovers = [f for f in os.listdir(tmp_path) if f.startswith(".tmp-")]
        assert leftovers == []


class TestVolumeType:
    def test_non_3d_rejected(self):
        with pytest.raises(DimensionError):
            Volume(np.zeros((2, 2)))
        with pytest.raises(DimensionError):
            SemanticLayout(np.zeros((2, 2, 2, 2), np.uint8))

    def test_values_coerced_to_float32(self):
        vol = Volume(np.zeros((2, 2, 2), np.float64))
        assert vol.values.dtype == np.float32
