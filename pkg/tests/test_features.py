"""Feature extraction and bbox-to-grid mask derivation."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relvae.dataio import BBox, SynthConfig, generate_synthetic_dataset
from relvae.features import (ConvBackbone, FeatureFileError, ImageFeatureMap,
                             PrecomputedFeatureSource, bbox_to_mask, extract_features,
                             read_feature_map, write_feature_map)


def _mask_oracle(bbox, image_size, grid):
    """Independent scalar-loop rasterization of the >0.5 overlap rule."""
    w, h = image_size
    gh, gw = grid
    cw, ch = w / gw, h / gh
    out = np.zeros((gh, gw), dtype=np.float32)
    for r in range(gh):
        for c in range(gw):
            ox = max(0.0, min(bbox.x2, (c + 1) * cw) - max(bbox.x1, c * cw))
            oy = max(0.0, min(bbox.y2, (r + 1) * ch) - max(bbox.y1, r * ch))
            if ox * oy / (cw * ch) > 0.5:
                out[r, c] = 1.0
    if not out.any():
        cx, cy = bbox.center
        out[min(int(cy / ch), gh - 1), min(int(cx / cw), gw - 1)] = 1.0
    return out


def test_mask_full_image():
    m = bbox_to_mask(BBox(0, 0, 64, 64), (64, 64), (4, 4))
    assert m.data.sum() == 16


def test_mask_exact_left_half():
    m = bbox_to_mask(BBox(0, 0, 32, 64), (64, 64), (4, 4))
    expected = np.zeros((4, 4))
    expected[:, :2] = 1
    np.testing.assert_array_equal(m.data, expected)


def test_mask_subcell_box_falls_back_to_center_cell():
    # box smaller than one 16px cell, centered in grid cell (row 2, col 1)
    box = BBox(21, 37, 27, 43)
    m = bbox_to_mask(box, (64, 64), (4, 4))
    np.testing.assert_array_equal(m.data, _mask_oracle(box, (64, 64), (4, 4)))
    assert m.data.sum() == 1
    assert m.data[2, 1] == 1


def test_mask_matches_oracle_on_random_boxes():
    rng = np.random.default_rng(3)
    for _ in range(300):
        gw, gh = int(rng.integers(2, 9)), int(rng.integers(2, 9))
        w, h = 8 * gw, 8 * gh
        x1 = float(rng.uniform(0, w - 1))
        y1 = float(rng.uniform(0, h - 1))
        box = BBox(x1, y1, float(rng.uniform(x1 + 0.5, w)), float(rng.uniform(y1 + 0.5, h)))
        m = bbox_to_mask(box, (w, h), (gh, gw))
        np.testing.assert_array_equal(m.data, _mask_oracle(box, (w, h), (gh, gw)))
        assert m.data.sum() >= 1


@st.composite
def _solid_box(draw, span=64.0, cell=16.0):
    # wide enough to fully cover interior cells, keeping the threshold rule active
    x1 = draw(st.floats(0, span - 2.2 * cell))
    y1 = draw(st.floats(0, span - 2.2 * cell))
    x2 = draw(st.floats(x1 + 2.0 * cell, span))
    y2 = draw(st.floats(y1 + 2.0 * cell, span))
    return BBox(x1, y1, x2, y2)


@settings(max_examples=60, deadline=None)
@given(_solid_box(), st.floats(0, 6), st.floats(0, 6), st.floats(0, 6), st.floats(0, 6))
def test_mask_monotone_under_enlargement(box, dl, dt, dr, db):
    grown = BBox(max(0.0, box.x1 - dl), max(0.0, box.y1 - dt),
                 min(64.0, box.x2 + dr), min(64.0, box.y2 + db))
    small = bbox_to_mask(box, (64, 64), (4, 4)).data
    big = bbox_to_mask(grown, (64, 64), (4, 4)).data
    assert np.all(big >= small)


@settings(max_examples=60, deadline=None)
@given(_solid_box(), _solid_box())
def test_union_box_mask_is_superset(b1, b2):
    union = b1.union_box(b2)
    mu = bbox_to_mask(union, (64, 64), (4, 4)).data
    for b in (b1, b2):
        assert np.all(mu >= bbox_to_mask(b, (64, 64), (4, 4)).data)


# -- feature extraction ---------------------------------------------------------


def test_extract_features_shape():
    backbone = ConvBackbone(np.random.default_rng(0))
    img = np.random.default_rng(1).random((3, 64, 64)).astype(np.float32)
    fmap = extract_features(img, backbone)
    assert (fmap.grid_h, fmap.grid_w, fmap.channels) == (8, 8, 64)
    assert fmap.image_size == (64, 64)


def test_extract_features_zero_init_constant_map():
    backbone = ConvBackbone(np.random.default_rng(0))
    for p in backbone.parameters().values():
        p.data = np.zeros_like(p.data)
    img = np.zeros((3, 64, 64), dtype=np.float32)
    fmap = extract_features(img, backbone)
    np.testing.assert_array_equal(fmap.data, np.zeros_like(fmap.data))


def test_extract_features_deterministic():
    backbone = ConvBackbone(np.random.default_rng(0))
    img = np.random.default_rng(2).random((3, 64, 64)).astype(np.float32)
    a = extract_features(img, backbone)
    b = extract_features(img, backbone)
    np.testing.assert_array_equal(a.data, b.data)


def test_extract_features_dimension_mismatch():
    backbone = ConvBackbone(np.random.default_rng(0))
    with pytest.raises(ValueError, match="divisible"):
        backbone.grid_for((60, 64))


def test_feature_file_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    fmap = ImageFeatureMap(rng.standard_normal((8, 8, 64)).astype(np.float32), (64, 64))
    p = tmp_path / "m.rvfm"
    write_feature_map(fmap, p)
    loaded = read_feature_map(p)
    np.testing.assert_array_equal(loaded.data, fmap.data)
    assert loaded.image_size == fmap.image_size


def test_feature_file_truncated(tmp_path):
    rng = np.random.default_rng(7)
    fmap = ImageFeatureMap(rng.standard_normal((4, 4, 8)).astype(np.float32), (32, 32))
    p = tmp_path / "m.rvfm"
    write_feature_map(fmap, p)
    p.write_bytes(p.read_bytes()[:-10])
    with pytest.raises(FeatureFileError, match="expected"):
        read_feature_map(p)


def test_precomputed_source_missing_file(tmp_path):
    scenes, _ = generate_synthetic_dataset(SynthConfig(n_scenes=1), seed=0)
    src = PrecomputedFeatureSource(tmp_path)
    with pytest.raises(FeatureFileError, match="no precomputed"):
        src.feature_map(scenes[0])


def test_precomputed_source_loads(tmp_path):
    scenes, _ = generate_synthetic_dataset(SynthConfig(n_scenes=1), seed=0)
    backbone = ConvBackbone(np.random.default_rng(0))
    fmap = backbone.feature_map(scenes[0])
    write_feature_map(fmap, tmp_path / f"{scenes[0].image_id}.rvfm")
    loaded = PrecomputedFeatureSource(tmp_path).feature_map(scenes[0])
    np.testing.assert_array_equal(loaded.data, fmap.data)
