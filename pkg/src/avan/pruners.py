"""Candidate-pair classifiers ("pruners") used as assignment baselines.

Each ordered pair of candidate segments around a cleft is scored by a network
that sees four channels: the image, a cleft representation, the candidate
presynaptic mask and the candidate postsynaptic mask. The proximity pruner
passes the signed-proximity volume as the cleft channel, the mask pruner the
cleft's binary mask. Assignment takes the highest-scoring pair.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from itertools import permutations
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .assignment import AssignParams, NoCandidatesError, candidate_segments
from .edges import EdgeGraph, SynapseEdge
from .model import NetConfig, TrainSchedule, build_network, run_training
from .synthgen import SyntheticWorld
from .targets import SignedProximityParams, signed_proximity_target
from .validation import check_same_geometry, check_world_has_image
from .volume import DEFAULT_PATCH_SHAPE, PatchSpec, centroid, extract_patch

__all__ = [
    "CandidatePair",
    "candidate_pairs",
    "pruner_forward",
    "assign_by_pruner",
    "PairSampler",
    "PairOracle",
    "PrunerAssigner",
    "VARIANTS",
]

logger = logging.getLogger(__name__)

VARIANTS = ("mask", "proximity")


@dataclass(frozen=True)
class CandidatePair:
    cleft_id: int
    pre_id: int
    post_id: int
    label: bool | None = None

    def __post_init__(self):
        if self.pre_id == self.post_id:
            raise ValueError("candidate pair members must be distinct")


def candidate_pairs(cleft_mask, segmentation, radius_nm: float, cleft_id: int = 0, true_edge: SynapseEdge | None = None):
    """All ordered pairs of distinct candidates, labelled when the true edge is known.

    Returns ``(pairs, warning)``; ``warning`` is set when fewer than two
    candidates exist.
    """
    cands = sorted(candidate_segments(cleft_mask, segmentation, radius_nm))
    if len(cands) < 2:
        return [], "insufficient_candidates"
    pairs = []
    for a, b in permutations(cands, 2):
        label = None
        if true_edge is not None:
            label = (a,) == true_edge.pre_ids and (b,) == true_edge.post_ids
        pairs.append(CandidatePair(cleft_id, a, b, label))
    return pairs, None


def _pair_inputs(image_patch, cleft_repr_patch, pre_mask_patch, post_mask_patch) -> np.ndarray:
    chans = [np.asarray(getattr(p, "data", p), dtype=np.float32) for p in
             (image_patch, cleft_repr_patch, pre_mask_patch, post_mask_patch)]
    shapes = {c.shape for c in chans}
    if len(shapes) != 1 or chans[0].ndim != 3:
        raise ValueError(f"pruner channels must share one 3D shape, got {sorted(shapes)}")
    return np.stack(chans)


def pruner_forward(network, image_patch, cleft_repr_patch, pre_mask_patch, post_mask_patch) -> float:
    """Probability that ``(pre, post)`` is the synaptic pair: pooled logit through a sigmoid."""
    x = _pair_inputs(image_patch, cleft_repr_patch, pre_mask_patch, post_mask_patch)
    cfg = getattr(network, "config", None)
    if cfg is not None and (cfg.in_channels != 4 or cfg.out_channels != 1):
        raise ValueError(f"pruner network must map 4 channels to 1, got {cfg.in_channels}->{cfg.out_channels}")
    with torch.no_grad():
        logit = network(torch.from_numpy(x)[None])
    logit = torch.as_tensor(logit).reshape(-1)
    if logit.numel() != 1:
        raise ValueError("pruner network must produce a single logit per sample")
    return float(torch.sigmoid(logit)[0])


def _pair_context(image, segmentation, cleft_mask, cleft_repr, params: AssignParams):
    mask = np.asarray(getattr(cleft_mask, "data", cleft_mask)).astype(bool)
    spec = PatchSpec(centroid(mask.astype(np.uint8), 1), params.patch_shape, params.image_pad)
    img = extract_patch(image, spec).data
    seg = extract_patch(segmentation, spec).data
    rep = extract_patch(cleft_repr, spec).data if cleft_repr is not None else None
    return spec, img, seg, rep


def assign_by_pruner(network, image, segmentation, cleft_mask, cleft_repr, cleft_id: int,
                     params: AssignParams = AssignParams(), candidates=None) -> SynapseEdge:
    """Score every ordered candidate pair and keep the best; lexicographic tie-break.

    ``cleft_repr`` is the volume fed as the cleft channel (signed proximity or
    a cleft mask); ``None`` means the cleft's own binary mask.
    """
    mask = np.asarray(getattr(cleft_mask, "data", cleft_mask)).astype(bool)
    if candidates is None:
        candidates = candidate_segments(mask, segmentation, params.radius_nm)
    cands = sorted(candidates)
    if len(cands) < 2:
        raise NoCandidatesError(f"insufficient candidates for cleft {cleft_id}: {cands}")
    spec, img, seg, rep = _pair_context(image, segmentation, mask, cleft_repr, params)
    if rep is None:
        rep = extract_patch(type(segmentation)(mask.astype(np.uint32), segmentation.resolution), spec).data > 0
    scores: dict[tuple[int, int], float] = {}
    masks = {c: seg == c for c in cands}
    for a, b in permutations(cands, 2):
        scores[(a, b)] = pruner_forward(network, img, rep, masks[a], masks[b])
    top = max(scores.values())
    winners = sorted(k for k, v in scores.items() if v == top)
    pre, post = winners[0]
    flags = ("pair_tie",) if len(winners) > 1 else ()
    pre_scores = {a: max(v for (x, _), v in scores.items() if x == a) for a in cands}
    post_scores = {b: max(v for (_, y), v in scores.items() if y == b) for b in cands}
    return SynapseEdge(cleft_id, (pre,), (post,), pre_scores, post_scores, flags, spec.center)


class PairSampler:
    """Balanced positive/negative candidate-pair windows from training worlds.

    Alternate draws are positives (the true ordered pair) and negatives (a
    random other ordered pair; the swapped pair is chosen half of the time).
    """

    def __init__(self, worlds: Sequence[SyntheticWorld], variant: str, radius_nm: float = 30.0,
                 patch_shape=DEFAULT_PATCH_SHAPE, image_pad: float = 0.0, prox=SignedProximityParams()):
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        self.variant = variant
        self.patch_shape = patch_shape
        self.image_pad = image_pad
        self.items = []
        for w in worlds:
            check_world_has_image(w)
            rep = signed_proximity_target(w, prox) if variant == "proximity" else None
            coords = np.argwhere(w.cleft_labels.data > 0)
            labels_at = w.cleft_labels.data[tuple(coords.T)]
            for e in w.true_edges:
                if not e.is_diadic:
                    continue
                mask = w.cleft_labels.data == e.cleft_id
                cands = sorted(candidate_segments(mask, w.segmentation, radius_nm))
                if e.pre_ids[0] not in cands or e.post_ids[0] not in cands:
                    continue
                self.items.append((w, rep, e, cands, coords[labels_at == e.cleft_id]))
        if not self.items:
            raise ValueError("no training locations")
        self._count = 0

    def __call__(self, rng: np.random.Generator):
        w, rep, e, cands, voxels = self.items[rng.integers(len(self.items))]
        positive = self._count % 2 == 0
        self._count += 1
        pre, post = e.pre_ids[0], e.post_ids[0]
        if not positive:
            others = [p for p in permutations(cands, 2) if p != (pre, post)]
            if rng.random() < 0.5 or len(others) == 1:
                pre, post = post, pre
            else:
                rest = [p for p in others if p != (post, pre)]
                pre, post = rest[rng.integers(len(rest))]
        center = tuple(int(v) for v in voxels[rng.integers(len(voxels))])
        spec = PatchSpec(center, self.patch_shape, self.image_pad)
        img = extract_patch(w.image, spec).data
        seg = extract_patch(w.segmentation, spec).data
        if rep is None:
            cleft = extract_patch(w.cleft_labels, spec).data == e.cleft_id
        else:
            cleft = extract_patch(rep, spec).data
        x = _pair_inputs(img, cleft, seg == pre, seg == post)
        return x, np.array([1.0 if positive else 0.0], dtype=np.float32)


def _pooled_loss(logits, target):
    return F.binary_cross_entropy_with_logits(logits, target)


class PairOracle:
    """Stand-in pruner scoring 1 on the true ordered pair and 0 otherwise."""

    def __init__(self, world: SyntheticWorld, patch_shape=DEFAULT_PATCH_SHAPE, logit: float = 20.0):
        self.logit = logit
        self.calls = 0
        self.config = NetConfig(4, 1, patch_shape=patch_shape)
        self._keys = set()
        for e in world.true_edges:
            spec = PatchSpec(centroid(world.cleft_labels, e.cleft_id), patch_shape)
            seg = extract_patch(world.segmentation, spec).data
            self._keys.add(np.packbits(np.stack([np.isin(seg, e.pre_ids), np.isin(seg, e.post_ids)])).tobytes())

    def __call__(self, x):
        self.calls += 1
        arr = x.detach().cpu().numpy() if hasattr(x, "detach") else np.asarray(x)
        out = [self.logit if np.packbits(s[2:] > 0.5).tobytes() in self._keys else -self.logit for s in arr]
        return torch.tensor(out, dtype=torch.float32)[:, None]


class PrunerAssigner(BaseEstimator):
    """Candidate-pair classifier baseline with an sklearn-style interface.

    ``variant="proximity"`` feeds signed proximity as the cleft channel,
    ``variant="mask"`` the cleft's binary mask.
    """

    def __init__(
        self,
        variant: str = "mask",
        width: int = 8,
        depth: int = 2,
        iterations: int = 1000,
        batch_size: int = 2,
        lr_schedule=((0, 1e-3),),
        radius_nm: float = 30.0,
        d_max: float = 120.0,
        patch_shape=DEFAULT_PATCH_SHAPE,
        image_pad: float = 0.0,
        norm: str = "instance",
        seed: int = 0,
    ):
        self.variant = variant
        self.width = width
        self.depth = depth
        self.iterations = iterations
        self.batch_size = batch_size
        self.lr_schedule = lr_schedule
        self.radius_nm = radius_nm
        self.d_max = d_max
        self.patch_shape = patch_shape
        self.image_pad = image_pad
        self.norm = norm
        self.seed = seed

    def net_config(self) -> NetConfig:
        return NetConfig(4, 1, self.width, self.depth, norm=self.norm, patch_shape=tuple(self.patch_shape), seed=self.seed)

    def assign_params(self) -> AssignParams:
        return AssignParams(self.radius_nm, None, tuple(self.patch_shape), self.image_pad)

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(self.iterations, self.batch_size, tuple(self.lr_schedule), seed=self.seed)

    def fit(self, worlds: Sequence[SyntheticWorld], y=None, checkpoint_path=None, resume: bool = False):
        worlds = [worlds] if isinstance(worlds, SyntheticWorld) else list(worlds)
        sampler = PairSampler(worlds, self.variant, self.radius_nm, tuple(self.patch_shape), self.image_pad,
                              SignedProximityParams(self.d_max))
        net = build_network(self.net_config())
        self.network_, self.loss_log_, info = run_training(net, sampler, self.schedule(), loss_fn=_pooled_loss,
                                                           checkpoint_path=checkpoint_path, resume=resume)
        self.deterministic_ = info["deterministic"]
        return self

    def set_network(self, network):
        self.network_ = network
        self.loss_log_ = []
        return self

    def cleft_representation(self, world: SyntheticWorld):
        if self.variant == "proximity":
            return signed_proximity_target(world, SignedProximityParams(self.d_max))
        return None

    def predict(self, world: SyntheticWorld, cleft_labels=None, cleft_repr=None) -> EdgeGraph:
        """Assign every cleft; ``cleft_repr`` overrides the cleft-channel volume."""
        check_is_fitted(self, "network_")
        check_world_has_image(world)
        labels = world.cleft_labels if cleft_labels is None else cleft_labels
        check_same_geometry(world.segmentation, labels)
        arr = np.asarray(getattr(labels, "data", labels))
        ids = world.cleft_ids() if cleft_labels is None else [int(i) for i in np.unique(arr) if i]
        if cleft_repr is None and self.variant == "proximity":
            if cleft_labels is not None:
                raise ValueError("proximity pruner on predicted clefts needs an explicit cleft_repr volume")
            cleft_repr = self.cleft_representation(world)
        params = self.assign_params()
        edges = []
        for cid in ids:
            mask = arr == cid
            rep = cleft_repr
            if rep is None:
                rep = type(world.cleft_labels)(mask.astype(np.uint32), world.resolution)
            try:
                edges.append(assign_by_pruner(self.network_, world.image, world.segmentation, mask, rep, cid, params))
            except NoCandidatesError as exc:
                logger.info("cleft %s skipped: %s", cid, exc)
        return EdgeGraph(edges, {"assigner": f"{self.variant}_pruner", **self.get_params()})
