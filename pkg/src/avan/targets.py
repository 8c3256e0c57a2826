"""Training-target representations: cleft mask, signed proximity, partner masks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .synthgen import SyntheticWorld
from .volume import BinaryVolume, PatchSpec, ScalarVolume, extract_patch

__all__ = [
    "SignedProximityParams",
    "cleft_mask_target",
    "signed_proximity_target",
    "partner_mask_targets",
]


@dataclass(frozen=True)
class SignedProximityParams:
    d_max: float = 120.0
    """Support radius of the ramp, nm."""

    def __post_init__(self):
        if self.d_max <= 0:
            raise ValueError("d_max must be positive")


def cleft_mask_target(world: SyntheticWorld) -> BinaryVolume:
    return BinaryVolume(world.cleft_labels.data > 0, world.resolution)


def signed_proximity_target(world: SyntheticWorld, p: SignedProximityParams = SignedProximityParams()) -> ScalarVolume:
    """Distance ramp ``1 - d / d_max`` around clefts, signed by partner side.

    The sign is +1 inside the nearest cleft's presynaptic segment(s), -1 inside
    its postsynaptic segment(s), 0 inside any other segment. Extracellular
    voxels take the sign of whichever partner is closer (0 on ties).
    """
    res = world.resolution.zyx
    clefts = world.cleft_labels.data
    seg = world.segmentation.data
    out = np.zeros(clefts.shape, dtype=np.float32)
    if not clefts.any():
        return ScalarVolume(out, world.resolution)
    dist, inds = ndimage.distance_transform_edt(clefts == 0, sampling=res, return_indices=True)
    support = dist <= p.d_max
    nearest = np.zeros(clefts.shape, dtype=clefts.dtype)
    nearest[support] = clefts[inds[0][support], inds[1][support], inds[2][support]]
    del inds
    magnitude = np.where(support, 1.0 - dist / p.d_max, 0.0)

    half = np.ceil(2 * p.d_max / np.array(res)).astype(int) + 1
    for e in world.true_edges:
        where = np.nonzero(nearest == e.cleft_id)
        if where[0].size == 0:
            continue
        lo = np.maximum([a.min() for a in where] - half, 0)
        hi = np.minimum([a.max() + 1 for a in where] + half, clefts.shape)
        box = tuple(slice(a, b) for a, b in zip(lo, hi))
        lseg = seg[box]
        pre, post = np.isin(lseg, e.pre_ids), np.isin(lseg, e.post_ids)
        sign = np.zeros(lseg.shape, dtype=np.float32)
        sign[pre] = 1.0
        sign[post] = -1.0
        extra = lseg == 0
        if extra.any():
            d_pre = ndimage.distance_transform_edt(~pre, sampling=res) if pre.any() else np.full(lseg.shape, np.inf)
            d_post = ndimage.distance_transform_edt(~post, sampling=res) if post.any() else np.full(lseg.shape, np.inf)
            sign[extra & (d_pre < d_post)] = 1.0
            sign[extra & (d_post < d_pre)] = -1.0
        mine = nearest[box] == e.cleft_id
        sub = out[box]
        sub[mine] = (sign * magnitude[box])[mine]
        out[box] = sub
    return ScalarVolume(out, world.resolution)


def partner_mask_targets(world: SyntheticWorld, cleft_id: int, spec: PatchSpec) -> tuple[BinaryVolume, BinaryVolume]:
    """Patch-shaped masks of the true pre- and postsynaptic segments."""
    edge = world.edge(cleft_id)
    patch = extract_patch(world.segmentation, spec)
    pre = BinaryVolume(np.isin(patch.data, edge.pre_ids), patch.resolution, patch.origin)
    post = BinaryVolume(np.isin(patch.data, edge.post_ids), patch.resolution, patch.origin)
    return pre, post
