"""Seeded procedural EM-like worlds.

A world is a morphological segmentation of random-walk tubes (thin axon-like
and thick dendrite-like neurites), a set of cleft instances placed at
axon/dendrite appositions, and the ``(cleft, pre, post)`` edge list. The
renderer paints dark membranes, presynaptic vesicle speckles and a darkened
postsynaptic density, which are the cues a network can learn direction from.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .edges import SynapseEdge
from .volume import (
    DEFAULT_PATCH_SHAPE,
    LabelVolume,
    ScalarVolume,
    VoxelResolution,
    ball_offsets,
    centroid,
    load_volume,
    save_volume,
)

__all__ = [
    "GenParams",
    "SyntheticWorld",
    "generate_world",
    "render_image",
    "make_world",
    "split_slabs",
    "save_world",
    "load_world",
    "SPLIT_FRACTIONS",
]

logger = logging.getLogger(__name__)

SPLIT_FRACTIONS = (("train", 0.5), ("val", 0.25), ("test", 0.25))


@dataclass(frozen=True)
class GenParams:
    shape: tuple[int, int, int] = (128, 224, 224)
    n_neurites: int = 180
    axon_fraction: float = 0.6
    axon_radius_nm: tuple[float, float] = (45.0, 80.0)
    dendrite_radius_nm: tuple[float, float] = (100.0, 180.0)
    persistence: float = 0.15
    n_synapses: int = 360
    max_post_partners: int = 1
    cleft_halo_nm: float = 30.0
    cleft_radius_nm: float = 150.0
    cleft_spacing_nm: float = 150.0
    min_cleft_voxels: int = 40
    vesicle_density: float = 0.03
    vesicle_zone_nm: float = 240.0
    vesicle_radius_nm: float = 20.0
    psd_factor: float = 0.45
    psd_thickness_nm: float = 40.0
    interior_value: float = 0.75
    membrane_value: float = 0.25
    extracellular_value: float = 0.5
    vesicle_value: float = 0.3
    noise_sigma: float = 0.05
    resolution: VoxelResolution = field(default_factory=VoxelResolution)
    patch_shape: tuple[int, int, int] = DEFAULT_PATCH_SHAPE
    seed: int = 0

    def __post_init__(self):
        if self.n_neurites <= 0 or self.n_synapses < 0 or self.max_post_partners < 1:
            raise ValueError("neurite count must be positive and synapse count non-negative")
        for name in ("axon_radius_nm", "dendrite_radius_nm"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < low <= high")
        if self.cleft_halo_nm <= 0:
            raise ValueError("cleft_halo_nm must be positive")
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "patch_shape", tuple(int(s) for s in self.patch_shape))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution"] = self.resolution.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenParams":
        d = dict(d)
        if "resolution" in d and isinstance(d["resolution"], dict):
            d["resolution"] = VoxelResolution.from_dict(d["resolution"])
        for key in ("shape", "patch_shape", "axon_radius_nm", "dendrite_radius_nm"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class SyntheticWorld:
    segmentation: LabelVolume
    cleft_labels: LabelVolume
    true_edges: tuple[SynapseEdge, ...]
    roles: dict[int, str]
    params: GenParams
    image: ScalarVolume | None = None
    z_offset: int = 0
    flags: tuple[str, ...] = ()

    @property
    def resolution(self) -> VoxelResolution:
        return self.segmentation.resolution

    @property
    def shape(self):
        return self.segmentation.shape

    def edge(self, cleft_id: int) -> SynapseEdge:
        for e in self.true_edges:
            if e.cleft_id == cleft_id:
                return e
        raise KeyError(f"no true edge for cleft {cleft_id}")

    def cleft_ids(self) -> list[int]:
        return [e.cleft_id for e in self.true_edges]


def _random_walk(rng, start, length_nm, step_nm, persistence, extent_nm):
    """Both-way persistent random walk from ``start`` until it leaves the box."""
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    n_steps = int(length_nm / step_nm)
    points = [start]
    for sign in (1.0, -1.0):
        pos, d = start.copy(), sign * direction
        kicks = rng.normal(scale=persistence, size=(n_steps, 3))
        trail = []
        for kick in kicks:
            d = d + kick
            d /= np.linalg.norm(d)
            pos = pos + step_nm * d
            if np.any(pos < 0) or np.any(pos >= extent_nm):
                break
            trail.append(pos)
        points = (trail[::-1] + points) if sign < 0 else (points + trail)
    return np.array(points)


def _tube_segmentation(params: GenParams, rng):
    shape = np.array(params.shape)
    res = np.array(params.resolution.zyx)
    extent = shape * res
    n_axons = int(round(params.axon_fraction * params.n_neurites))
    radii = np.zeros(params.n_neurites + 1)
    roles: dict[int, str] = {}
    centerline = np.zeros(params.shape, dtype=np.int32)
    step = 0.5 * res.min()
    for nid in range(1, params.n_neurites + 1):
        is_axon = nid <= n_axons
        lo, hi = params.axon_radius_nm if is_axon else params.dendrite_radius_nm
        radii[nid] = rng.uniform(lo, hi)
        roles[nid] = "axon" if is_axon else "dendrite"
        start = rng.uniform(0, 1, size=3) * extent
        pts = _random_walk(rng, start, 2 * extent.max(), step, params.persistence, extent)
        idx = np.clip((pts / res).astype(int), 0, shape - 1)
        centerline[idx[:, 0], idx[:, 1], idx[:, 2]] = nid
    dist, inds = ndimage.distance_transform_edt(
        centerline == 0, sampling=params.resolution.zyx, return_indices=True
    )
    nearest = centerline[inds[0], inds[1], inds[2]]
    del inds
    seg = np.where(dist <= radii[nearest], nearest, 0).astype(np.int32)
    return seg, roles


def _carve_membranes(seg: np.ndarray) -> np.ndarray:
    """One-voxel gap between touching segments (the lower ID gives way)."""
    carve = np.zeros(seg.shape, dtype=bool)
    for axis in range(3):
        for shift in (1, -1):
            nb = np.roll(seg, shift, axis=axis)
            edge = [slice(None)] * 3
            edge[axis] = 0 if shift == 1 else -1
            nb[tuple(edge)] = 0
            carve |= (seg > 0) & (nb > seg)
    out = seg.copy()
    out[carve] = 0
    return out


def _interface_seeds(seg: np.ndarray, roles: dict[int, str]):
    """Voxel pairs across an axon/dendrite boundary, rows ``(z, y, x, axon, dendrite)``."""
    is_axon = np.zeros(int(seg.max()) + 1, dtype=bool)
    for nid, role in roles.items():
        is_axon[nid] = role == "axon"
    rows = []
    for axis in range(3):
        moved = np.moveaxis(seg, axis, 0)
        lo, hi = moved[:-1], moved[1:]
        hit = (lo > 0) & (hi > 0) & (lo != hi) & (is_axon[lo] != is_axon[hi])
        if not hit.any():
            continue
        coords = np.nonzero(hit)
        order = [axis] + [i for i in range(3) if i != axis]
        zyx = [None] * 3
        for k, ax in enumerate(order):
            zyx[ax] = coords[k]
        la, lb = lo[hit], hi[hit]
        axon = np.where(is_axon[la], la, lb)
        dend = np.where(is_axon[la], lb, la)
        rows.append(np.column_stack(zyx + [axon, dend]))
    if not rows:
        return np.zeros((0, 5), dtype=np.int64)
    return np.concatenate(rows).astype(np.int64)


def _box(center, half, shape):
    lo = np.maximum(np.asarray(center) - half, 0)
    hi = np.minimum(np.asarray(center) + half + 1, shape)
    return tuple(slice(a, b) for a, b in zip(lo, hi)), lo


def _within(sub: np.ndarray, radius_nm: float, sampling) -> np.ndarray:
    """Voxels within ``radius_nm`` of the (local) foreground ``sub``."""
    if not sub.any():
        return np.zeros(sub.shape, dtype=bool)
    return ndimage.distance_transform_edt(~sub, sampling=sampling) <= radius_nm


def _stratified_order(z: np.ndarray, nz: int, rng, n_bins: int = 4) -> np.ndarray:
    """Random seed order that alternates between z-quarters, so placements spread evenly in depth."""
    order = rng.permutation(len(z))
    bins = np.minimum(z[order] * n_bins // nz, n_bins - 1)
    rank = np.empty(len(z), dtype=np.int64)
    for b in range(n_bins):
        sel = np.flatnonzero(bins == b)
        rank[sel] = np.arange(len(sel))
    return order[np.lexsort((bins, rank))]


def _place_clefts(params: GenParams, seg_carved, seeds, roles, rng):
    res = np.array(params.resolution.zyx)
    shape = np.array(seg_carved.shape)
    h, R = params.cleft_halo_nm, params.cleft_radius_nm
    half = np.ceil((R + 2 * h + 2 * res.max()) / res).astype(int)
    clefts = np.zeros(seg_carved.shape, dtype=np.uint32)
    blocked = np.zeros(seg_carved.shape, dtype=bool)
    spacing_half = np.ceil(params.cleft_spacing_nm / res).astype(int)
    struct26 = ndimage.generate_binary_structure(3, 3)
    edges: list[SynapseEdge] = []
    order = _stratified_order(seeds[:, 0], seg_carved.shape[0], rng)
    for row in seeds[order]:
        if len(edges) >= params.n_synapses:
            break
        p, axon, dend = row[:3], int(row[3]), int(row[4])
        if blocked[tuple(p)]:
            continue
        box, lo = _box(p, half, shape)
        local = seg_carved[box]
        grid = np.meshgrid(*[(np.arange(s.start, s.stop) - c) * r for s, c, r in zip(box, p, res)], indexing="ij")
        near_seed = sum(g**2 for g in grid) <= R**2
        near_pre = _within(local == axon, h, params.resolution.zyx)
        posts = [dend]
        if params.max_post_partners > 1:
            others = [
                int(i) for i in np.unique(local[near_seed & (local > 0)])
                if i not in (axon, dend) and roles.get(int(i)) == "dendrite"
            ]
            rng.shuffle(others)
            posts += others[: params.max_post_partners - 1]
        near_post = {d: _within(local == d, h, params.resolution.zyx) for d in posts}
        near_any_post = np.logical_or.reduce(list(near_post.values()))
        foreign = (local > 0) & ~np.isin(local, [axon] + posts)
        near_foreign = _within(foreign, h, params.resolution.zyx)
        band = near_pre & near_any_post & near_seed & ~near_foreign & ~blocked[box]
        comps, _ = ndimage.label(band, structure=struct26)
        lp = tuple(p - lo)
        if comps[lp] == 0:
            continue
        cleft = comps == comps[lp]
        if cleft.sum() < params.min_cleft_voxels:
            continue
        post_ids = tuple(d for d in posts if (cleft & near_post[d]).any())
        if not post_ids:
            continue
        cid = len(edges) + 1
        clefts[box][cleft] = cid
        # keep later clefts at least cleft_spacing_nm away
        where = np.argwhere(cleft) + lo
        glo = np.maximum(where.min(0) - spacing_half, 0)
        ghi = np.minimum(where.max(0) + spacing_half + 1, shape)
        gbox = tuple(slice(a, b) for a, b in zip(glo, ghi))
        grown = clefts[gbox] == cid
        blocked[gbox] |= _within(grown, params.cleft_spacing_nm, params.resolution.zyx)
        edges.append(SynapseEdge(cid, (axon,), post_ids))
    return clefts, edges


def generate_world(params: GenParams) -> SyntheticWorld:
    """Build segmentation, clefts and true edges, deterministically from ``params.seed``."""
    if any(s < p for s, p in zip(params.shape, params.patch_shape)):
        raise ValueError(f"volume too small for patch: {params.shape} < {params.patch_shape}")
    rng = np.random.default_rng([params.seed, 0])
    seg, roles = _tube_segmentation(params, rng)
    seeds = _interface_seeds(seg, roles)
    carved = _carve_membranes(seg)
    present = set(np.unique(carved).tolist()) - {0}
    roles = {k: v for k, v in roles.items() if k in present}
    flags: tuple[str, ...] = ()
    if params.n_synapses > 0:
        clefts, edges = _place_clefts(params, carved, seeds, roles, rng)
    else:
        clefts, edges = np.zeros(carved.shape, dtype=np.uint32), []
    if len(edges) < params.n_synapses:
        flags = ("insufficient_adjacency",)
        warnings.warn(
            f"placed {len(edges)} of {params.n_synapses} synapses (insufficient adjacency)",
            RuntimeWarning,
            stacklevel=2,
        )
    res = params.resolution
    return SyntheticWorld(
        segmentation=LabelVolume(carved, res),
        cleft_labels=LabelVolume(clefts, res),
        true_edges=tuple(edges),
        roles=roles,
        params=params,
        flags=flags,
    )


def render_image(world: SyntheticWorld, params: GenParams | None = None) -> ScalarVolume:
    """Grayscale EM-like rendering in [0, 1]."""
    params = params or world.params
    seg = world.segmentation.data
    clefts = world.cleft_labels.data
    res = params.resolution
    rng = np.random.default_rng([params.seed, 1])

    img = np.full(seg.shape, params.extracellular_value, dtype=np.float32)
    img[seg > 0] = params.interior_value
    fg = seg > 0
    touching = ndimage.binary_dilation(fg, structure=ndimage.generate_binary_structure(3, 1))
    img[~fg & touching] = params.membrane_value

    zone_half = np.ceil((params.cleft_radius_nm + params.vesicle_zone_nm + 2 * max(res.zyx)) / np.array(res.zyx)).astype(int)
    vesicle_ball = ball_offsets(params.vesicle_radius_nm, res)
    for e in world.true_edges:
        where = np.nonzero(clefts == e.cleft_id)
        if where[0].size == 0:
            continue
        c = [int(np.mean(a)) for a in where]
        box, _ = _box(c, zone_half, np.array(seg.shape))
        lseg, lcleft = seg[box], clefts[box] == e.cleft_id
        dist = ndimage.distance_transform_edt(~lcleft, sampling=res.zyx)
        pre = np.isin(lseg, e.pre_ids)
        zone = pre & (dist <= params.vesicle_zone_nm)
        centers = zone & (rng.random(zone.shape) < params.vesicle_density)
        vesicles = ndimage.binary_dilation(centers, structure=vesicle_ball) & pre
        sub = img[box]
        sub[vesicles] = params.vesicle_value
        psd = np.isin(lseg, e.post_ids) & (dist <= params.psd_thickness_nm)
        sub[psd] *= params.psd_factor
        img[box] = sub

    if params.noise_sigma > 0:
        img += rng.normal(0.0, params.noise_sigma, size=img.shape).astype(np.float32)
    np.clip(img, 0.0, 1.0, out=img)
    return ScalarVolume(img, res)


def make_world(params: GenParams) -> SyntheticWorld:
    """``generate_world`` followed by ``render_image``, image attached."""
    world = generate_world(params)
    return replace(world, image=render_image(world, params))


def slab_bounds(nz: int) -> dict[str, tuple[int, int]]:
    bounds, z = {}, 0
    for i, (name, frac) in enumerate(SPLIT_FRACTIONS):
        n = nz - z if i == len(SPLIT_FRACTIONS) - 1 else int(round(frac * nz))
        bounds[name] = (z, z + n)
        z += n
    return bounds


def split_slabs(world: SyntheticWorld) -> dict[str, SyntheticWorld]:
    """Contiguous 50/25/25 z-slabs; a cleft belongs to the slab holding its centroid."""
    bounds = slab_bounds(world.shape[0])
    owner = {}
    for e in world.true_edges:
        z = centroid(world.cleft_labels, e.cleft_id)[0]
        owner[e.cleft_id] = next(n for n, (a, b) in bounds.items() if a <= z < b)
    out = {}
    for name, (a, b) in bounds.items():
        sl = (slice(a, b), slice(None), slice(None))
        keep = [e for e in world.true_edges if owner[e.cleft_id] == name]
        clefts = world.cleft_labels.data[sl].copy()
        kept_ids = np.array([e.cleft_id for e in keep], dtype=np.uint32)
        clefts[~np.isin(clefts, kept_ids)] = 0
        present = set(np.unique(clefts).tolist())
        keep = [e for e in keep if e.cleft_id in present]
        res = world.resolution
        out[name] = SyntheticWorld(
            segmentation=LabelVolume(world.segmentation.data[sl], res),
            cleft_labels=LabelVolume(clefts, res),
            true_edges=tuple(keep),
            roles=world.roles,
            params=world.params,
            image=ScalarVolume(world.image.data[sl], res) if world.image is not None else None,
            z_offset=world.z_offset + a,
            flags=world.flags,
        )
    return out


def save_world(world: SyntheticWorld, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_volume(world.segmentation, path / "segmentation")
    save_volume(world.cleft_labels, path / "clefts")
    if world.image is not None:
        save_volume(world.image, path / "image")
    edges = [{"cleft_id": e.cleft_id, "pre_ids": list(e.pre_ids), "post_ids": list(e.post_ids)} for e in world.true_edges]
    (path / "edges.json").write_text(json.dumps(edges, indent=2) + "\n")
    meta = {
        "params": world.params.to_dict(),
        "seed": world.params.seed,
        "roles": {str(k): v for k, v in sorted(world.roles.items())},
        "z_offset": world.z_offset,
        "flags": list(world.flags),
    }
    (path / "world.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_world(path: str | Path) -> SyntheticWorld:
    path = Path(path)
    meta = json.loads((path / "world.json").read_text())
    edges = json.loads((path / "edges.json").read_text())
    image = load_volume(path / "image") if (path / "image").exists() else None
    return SyntheticWorld(
        segmentation=load_volume(path / "segmentation"),
        cleft_labels=load_volume(path / "clefts"),
        true_edges=tuple(SynapseEdge(e["cleft_id"], e["pre_ids"], e["post_ids"]) for e in edges),
        roles={int(k): v for k, v in meta["roles"].items()},
        params=GenParams.from_dict(meta["params"]),
        image=image,
        z_offset=meta.get("z_offset", 0),
        flags=tuple(meta.get("flags", ())),
    )
