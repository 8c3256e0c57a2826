from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from avan.volume import (
    BinaryVolume,
    LabelVolume,
    PatchSpec,
    ScalarVolume,
    VoxelResolution,
    ball_offsets,
    centroid,
    connected_components,
    dilate,
    extract_patch,
    load_volume,
    overlap_counts,
    save_volume,
)
from oracles import centroid_brute, dilate_brute, flood_fill_labels, overlap_brute

RES = VoxelResolution()


def test_resolution_defaults_and_validation():
    assert RES.zyx == (30.0, 12.0, 12.0)
    assert VoxelResolution.from_dict(RES.to_dict()) == RES
    with pytest.raises(ValueError):
        VoxelResolution(dx=0)


def test_volume_kinds_validate_and_freeze():
    v = ScalarVolume(np.zeros((2, 2, 2)))
    assert v.data.dtype == np.float32
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1
    with pytest.raises(ValueError):
        BinaryVolume(np.full((2, 2, 2), 2))
    with pytest.raises(ValueError):
        LabelVolume(np.full((2, 2, 2), -1))
    with pytest.raises(ValueError):
        ScalarVolume(np.zeros((2, 2)))
    assert list(LabelVolume(np.array([[[0, 5, 3]]])).ids()) == [3, 5]


# connected components

def test_components_empty_and_full():
    lab = connected_components(np.zeros((3, 3, 3)))
    assert lab.data.max() == 0
    lab = connected_components(np.ones((4, 4, 4)), connectivity=6)
    assert set(np.unique(lab.data)) == {1}


def test_components_two_separated_voxels():
    m = np.zeros((1, 1, 3), dtype=bool)
    m[0, 0, 0] = m[0, 0, 2] = True
    lab = connected_components(m, connectivity=6)
    assert lab.data.ravel().tolist() == [1, 0, 2]


def test_components_diagonal_depends_on_connectivity():
    m = np.zeros((2, 2, 2), dtype=bool)
    m[0, 0, 0] = m[1, 1, 1] = True
    assert connected_components(m, 6).data.max() == 2
    assert connected_components(m, 26).data.max() == 1


def test_components_bad_connectivity():
    with pytest.raises(ValueError):
        connected_components(np.zeros((2, 2, 2)), connectivity=18)


@pytest.mark.parametrize("connectivity", [6, 26])
def test_components_match_flood_fill(connectivity):
    rng = np.random.default_rng(1234 + connectivity)
    for _ in range(10):
        mask = rng.random((16, 16, 16)) < rng.uniform(0.05, 0.4)
        got = connected_components(mask, connectivity).data
        assert np.array_equal(got, flood_fill_labels(mask, connectivity))


# dilation

def test_dilate_identity_and_empty():
    rng = np.random.default_rng(0)
    m = rng.random((5, 6, 7)) < 0.2
    assert np.array_equal(dilate(m, 0.0).data.astype(bool), m)
    assert not dilate(np.zeros((4, 4, 4)), 100.0).data.any()


def test_dilate_single_voxel_12nm_is_in_plane_cross():
    m = np.zeros((11, 11, 11), dtype=bool)
    m[5, 5, 5] = True
    got = {tuple(int(v) for v in o) for o in np.argwhere(dilate(m, 12.0).data) - 5}
    assert got == {(0, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)}


def test_ball_offsets_boundary_inclusive():
    ball = ball_offsets(30.0, RES)
    assert ball.shape == (3, 5, 5)
    assert ball[0, 2, 2] and ball[2, 2, 2]
    assert not ball[0, 2, 3]
    with pytest.raises(ValueError):
        ball_offsets(-1.0, RES)


@pytest.mark.parametrize("radius", [12.0, 24.0, 30.0, 36.0, 50.0])
def test_dilate_matches_brute_force(radius):
    rng = np.random.default_rng(int(radius))
    for _ in range(4):
        mask = rng.random((8, 12, 12)) < 0.03
        assert np.array_equal(dilate(mask, radius).data.astype(bool), dilate_brute(mask, radius, RES.zyx))


@settings(max_examples=30, deadline=None)
@given(
    arrays(np.bool_, (6, 8, 8)),
    st.floats(0, 60),
    st.floats(0, 60),
)
def test_dilate_monotone(mask, r1, r2):
    lo, hi = sorted((r1, r2))
    a = dilate(mask, lo).data.astype(bool)
    b = dilate(mask, hi).data.astype(bool)
    assert np.all(mask <= a)
    assert np.all(a <= b)


# centroid

def test_centroid_examples():
    lab = np.zeros((5, 8, 10), dtype=np.uint32)
    lab[3, 7, 9] = 1
    lab[0, 0, 0] = lab[0, 0, 2] = 2
    lab[1, 0, 0] = lab[1, 0, 1] = lab[1, 0, 3] = 3
    assert centroid(lab, 1) == (3, 7, 9)
    assert centroid(lab, 2) == (0, 0, 1)
    assert centroid(lab, 3) == (1, 0, 1)
    with pytest.raises(KeyError, match="unknown label"):
        centroid(lab, 99)


def test_centroid_rounds_half_up():
    lab = np.zeros((1, 1, 4), dtype=np.uint32)
    lab[0, 0, 0] = lab[0, 0, 1] = 1
    assert centroid(lab, 1) == (0, 0, 1)


def test_centroid_matches_exact_fraction_mean():
    rng = np.random.default_rng(7)
    for _ in range(20):
        lab = rng.integers(0, 4, size=(6, 7, 8)).astype(np.uint32)
        for i in np.unique(lab[lab > 0]):
            assert centroid(lab, int(i)) == centroid_brute(lab, int(i))


@settings(max_examples=30, deadline=None)
@given(arrays(np.bool_, (4, 5, 5)).filter(lambda a: a.any()), st.tuples(*[st.integers(0, 3)] * 3))
def test_centroid_translation_invariant(mask, shift):
    lab = mask.astype(np.uint32)
    big = np.zeros((7, 8, 8), dtype=np.uint32)
    big[shift[0]:shift[0] + 4, shift[1]:shift[1] + 5, shift[2]:shift[2] + 5] = lab
    c0 = centroid(lab, 1)
    assert centroid(big, 1) == tuple(c + s for c, s in zip(c0, shift))


# patches

def test_extract_patch_identity():
    vol = ScalarVolume(np.arange(4 * 6 * 8, dtype=np.float32).reshape(4, 6, 8))
    p = extract_patch(vol, PatchSpec((2, 3, 4), (4, 6, 8)))
    assert np.array_equal(p.data, vol.data)
    assert p.origin == (0, 0, 0)


def test_extract_patch_1d_analogue():
    vol = ScalarVolume(np.array([1, 2, 3, 4, 5], dtype=np.float32).reshape(1, 1, 5))
    p = extract_patch(vol, PatchSpec((0, 0, 1), (1, 1, 3)))
    assert p.data.ravel().tolist() == [1, 2, 3]


def test_extract_patch_corner_padding():
    vol = ScalarVolume(np.ones((4, 4, 4)))
    p = extract_patch(vol, PatchSpec((0, 0, 0), (4, 4, 4), pad_value=-2.0))
    assert p.origin == (-2, -2, -2)
    assert np.all(p.data[:2] == -2.0) and np.all(p.data[2:, 2:, 2:] == 1.0)
    lab = extract_patch(LabelVolume(np.ones((4, 4, 4))), PatchSpec((0, 0, 0), (4, 4, 4), pad_value=7))
    assert isinstance(lab, LabelVolume)
    assert lab.data[0, 0, 0] == 0


def test_extract_patch_out_of_bounds():
    with pytest.raises(IndexError, match="center out of bounds"):
        extract_patch(ScalarVolume(np.zeros((3, 3, 3))), PatchSpec((3, 0, 0), (1, 1, 1)))


@settings(max_examples=40, deadline=None)
@given(
    st.tuples(st.integers(0, 5), st.integers(0, 6), st.integers(0, 7)),
    st.tuples(st.integers(1, 9), st.integers(1, 9), st.integers(1, 9)),
)
def test_extract_patch_reads_back(center, shape):
    src = np.random.default_rng(0).random((6, 7, 8)).astype(np.float32)
    p = extract_patch(ScalarVolume(src), PatchSpec(center, shape, pad_value=-1.0))
    assert p.shape == shape
    for idx in np.ndindex(*shape):
        g = tuple(i + o for i, o in zip(idx, p.origin))
        if all(0 <= g[k] < src.shape[k] for k in range(3)):
            assert p.data[idx] == src[g]
        else:
            assert p.data[idx] == -1.0


# overlap

def test_overlap_examples():
    a = np.array([1, 1, 2]).reshape(1, 1, 3)
    b = np.array([3, 4, 4]).reshape(1, 1, 3)
    assert overlap_counts(a, b) == {(1, 3): 1, (1, 4): 1, (2, 4): 1}
    same = np.ones((2, 2, 2), dtype=np.uint32)
    assert overlap_counts(same, same) == {(1, 1): 8}
    x = np.zeros((1, 1, 2), dtype=np.uint32)
    y = x.copy()
    x[0, 0, 0], y[0, 0, 1] = 1, 1
    assert overlap_counts(x, y) == {}
    with pytest.raises(ValueError):
        overlap_counts(np.zeros((1, 1, 2)), np.zeros((1, 1, 3)))


def test_overlap_matches_enumeration_and_totals():
    rng = np.random.default_rng(3)
    for _ in range(10):
        a = rng.integers(0, 5, size=(6, 6, 6))
        b = rng.integers(0, 4, size=(6, 6, 6))
        table = overlap_counts(a, b)
        assert table == overlap_brute(a, b)
        for i in range(1, 5):
            assert sum(c for (ia, _), c in table.items() if ia == i) == int(((a == i) & (b != 0)).sum())


# on-disk container

@pytest.mark.parametrize("cls,values", [
    (ScalarVolume, np.random.default_rng(0).random((3, 4, 5))),
    (BinaryVolume, np.random.default_rng(1).random((3, 4, 5)) < 0.5),
    (LabelVolume, np.random.default_rng(2).integers(0, 2**32 - 1, size=(3, 4, 5), dtype=np.uint64)),
])
def test_volume_roundtrip_bit_exact(tmp_path, cls, values):
    vol = cls(values, VoxelResolution(4, 5, 6), origin=(1, -2, 3))
    save_volume(vol, tmp_path / "v")
    back = load_volume(tmp_path / "v")
    assert type(back) is cls
    assert back.data.tobytes() == vol.data.tobytes()
    assert back.resolution == vol.resolution and back.origin == vol.origin
    raw = (tmp_path / "v" / "data.raw").read_bytes()
    assert len(raw) == vol.data.size * vol.data.dtype.itemsize
