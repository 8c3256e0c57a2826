from __future__ import annotations

import numpy as np
import pytest
from conftest import small_params
from scipy import ndimage

from avan.synthgen import (
    GenParams,
    generate_world,
    load_world,
    make_world,
    render_image,
    save_world,
    slab_bounds,
    split_slabs,
)
from avan.volume import centroid, connected_components, dilate, overlap_counts

TWO = dict(shape=(18, 80, 80), n_neurites=2, axon_fraction=0.5, axon_radius_nm=(150.0, 150.0),
           dendrite_radius_nm=(300.0, 300.0), n_synapses=1, min_cleft_voxels=5)


def test_params_validation_and_roundtrip():
    p = small_params(seed=11)
    assert GenParams.from_dict(p.to_dict()) == p
    with pytest.raises(ValueError):
        GenParams(n_neurites=0)
    with pytest.raises(ValueError):
        GenParams(axon_radius_nm=(50.0, 10.0))
    with pytest.raises(ValueError, match="volume too small for patch"):
        generate_world(GenParams(shape=(10, 80, 80)))


def test_generation_is_deterministic():
    p = small_params(seed=2, n_synapses=8)
    a, b = make_world(p), make_world(p)
    assert a.segmentation.data.tobytes() == b.segmentation.data.tobytes()
    assert a.cleft_labels.data.tobytes() == b.cleft_labels.data.tobytes()
    assert a.image.data.tobytes() == b.image.data.tobytes()
    assert a.true_edges == b.true_edges


def test_zero_synapses():
    w = generate_world(small_params(n_synapses=0))
    assert not w.cleft_labels.data.any()
    assert w.true_edges == ()
    assert w.flags == ()


def test_insufficient_adjacency_warns():
    with pytest.warns(RuntimeWarning, match="insufficient adjacency"):
        w = generate_world(GenParams(**{**TWO, "n_synapses": 50}))
    assert "insufficient_adjacency" in w.flags
    assert 0 < len(w.true_edges) < 50


def test_two_adjacent_neurites_one_synapse():
    w = generate_world(GenParams(**TWO, seed=0))
    assert len(w.true_edges) == 1
    e = w.true_edges[0]
    assert (e.pre_ids, e.post_ids) == ((1,), (2,))
    grown = dilate(w.cleft_labels.data == e.cleft_id, w.params.cleft_halo_nm)
    touched = {b for (_, b) in overlap_counts(grown.data, w.segmentation.data)}
    assert touched == {1, 2}


def test_world_invariants(small_world):
    w = small_world
    seg, clefts = w.segmentation.data, w.cleft_labels.data
    ids = sorted(int(i) for i in np.unique(clefts) if i)
    assert ids == sorted(w.cleft_ids())
    present = set(np.unique(seg).tolist())
    for e in w.true_edges:
        mask = clefts == e.cleft_id
        assert connected_components(mask, 26).data.max() == 1
        (pre,), (post,) = e.pre_ids, e.post_ids
        assert pre != post and pre in present and post in present
        assert w.roles[pre] == "axon" and w.roles[post] == "dendrite"
        # cleft voxels lie within the halo of both partners
        for partner in (pre, post):
            assert np.all(dilate(seg == partner, w.params.cleft_halo_nm).data[mask])
        hits = overlap_counts(dilate(mask, w.params.cleft_halo_nm).data, seg)
        assert hits.get((1, pre), 0) >= 1 and hits.get((1, post), 0) >= 1
        # the dilated interface may reach into the two partners but never a third segment
        assert set(np.unique(seg[mask]).tolist()) <= {0, pre, post}


def test_polyadic_world_edges(polyadic_world):
    w = polyadic_world
    assert any(len(e.post_ids) > 1 for e in w.true_edges)
    for e in w.true_edges:
        assert not set(e.pre_ids) & set(e.post_ids)
        assert all(w.roles[i] == "dendrite" for i in e.post_ids)


def test_noise_free_render_without_synapses():
    p = small_params(n_synapses=0, noise_sigma=0.0)
    w = generate_world(p)
    img = render_image(w, p).data
    seg = w.segmentation.data
    assert np.unique(img[seg > 0]).tolist() == [np.float32(p.interior_value)]
    assert set(np.unique(img).tolist()) <= {np.float32(v) for v in (p.interior_value, p.membrane_value, p.extracellular_value)}


def test_render_deterministic_and_bounded(small_world):
    again = render_image(small_world)
    assert again.data.tobytes() == small_world.image.data.tobytes()
    assert again.data.min() >= 0.0 and again.data.max() <= 1.0


def test_vesicle_cue_exists(small_world):
    w = small_world
    seg, img = w.segmentation.data, w.image.data
    pres = {e.pre_ids[0] for e in w.true_edges}
    posts = {i for e in w.true_edges for i in e.post_ids}
    cleft_any = w.cleft_labels.data > 0
    dist = ndimage.distance_transform_edt(~cleft_any, sampling=w.resolution.zyx)
    zone = np.isin(seg, list(pres)) & (dist <= w.params.vesicle_zone_nm)
    plain = (seg > 0) & ~np.isin(seg, list(pres | posts))
    assert img[zone].mean() < img[plain].mean()


def test_slab_split(small_world):
    nz = small_world.shape[0]
    bounds = slab_bounds(nz)
    assert bounds == {"train": (0, 18), "val": (18, 27), "test": (27, 36)}
    parts = split_slabs(small_world)
    assert sum(len(p.true_edges) for p in parts.values()) == len(small_world.true_edges)
    for name, part in parts.items():
        a, b = bounds[name]
        assert part.shape[0] == b - a and part.z_offset == a
        assert sorted(int(i) for i in np.unique(part.cleft_labels.data) if i) == sorted(part.cleft_ids())
        for cid in part.cleft_ids():
            z = centroid(small_world.cleft_labels, cid)[0]
            assert a <= z < b


def test_world_roundtrip(tmp_path, small_world):
    back = load_world(save_world(small_world, tmp_path / "w"))
    assert back.segmentation.data.tobytes() == small_world.segmentation.data.tobytes()
    assert back.cleft_labels.data.tobytes() == small_world.cleft_labels.data.tobytes()
    assert back.image.data.tobytes() == small_world.image.data.tobytes()
    assert back.true_edges == small_world.true_edges
    assert back.params == small_world.params and back.roles == small_world.roles
