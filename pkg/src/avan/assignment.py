"""Partner assignment with the cleft-conditioned mask network.

One forward pass per cleft: the window is centred on the cleft centroid, the
network sees ``[image, cleft mask]`` and emits pre- and postsynaptic masks.
Each candidate segment (one touching the dilated cleft) is scored by the mean
output over its voxels, and the best-scoring segments become the partners.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .edges import EdgeGraph, SynapseEdge
from .model import (
    CleftExampleSampler,
    NetConfig,
    TrainSchedule,
    build_network,
    forward_probabilities,
    run_training,
)
from .synthgen import SyntheticWorld
from .validation import check_same_geometry, check_world_has_image
from .volume import (
    DEFAULT_PATCH_SHAPE,
    BinaryVolume,
    LabelVolume,
    PatchSpec,
    ScalarVolume,
    VoxelResolution,
    centroid,
    dilate,
    extract_patch,
)

__all__ = [
    "AssignParams",
    "NoCandidatesError",
    "candidate_segments",
    "score_segments",
    "assign_partners",
    "assign_partners_polyadic",
    "assign_all",
    "PartnerMaskOracle",
    "AVANAssigner",
]

logger = logging.getLogger(__name__)


class NoCandidatesError(ValueError):
    pass


@dataclass(frozen=True)
class AssignParams:
    radius_nm: float = 30.0
    threshold: float | None = None
    patch_shape: tuple[int, int, int] = DEFAULT_PATCH_SHAPE
    image_pad: float = 0.0

    def __post_init__(self):
        if self.radius_nm < 0:
            raise ValueError("dilation radius must be non-negative")
        if self.threshold is not None and not 0.0 < self.threshold < 1.0:
            raise ValueError(f"polyadic threshold must lie in (0, 1), got {self.threshold}")
        object.__setattr__(self, "patch_shape", tuple(int(s) for s in self.patch_shape))


def candidate_segments(cleft_mask, segmentation, radius_nm: float, resolution: VoxelResolution | None = None) -> set[int]:
    """Segment IDs with at least one voxel inside the cleft dilated by ``radius_nm``."""
    mask = np.asarray(getattr(cleft_mask, "data", cleft_mask)).astype(bool)
    seg = np.asarray(getattr(segmentation, "data", segmentation))
    if mask.shape != seg.shape:
        raise ValueError(f"shape mismatch: {mask.shape} vs {seg.shape}")
    if not mask.any():
        raise ValueError("empty cleft")
    res = resolution or getattr(segmentation, "resolution", None) or VoxelResolution()
    grown = dilate(mask, radius_nm, res).data.astype(bool)
    ids = np.unique(seg[grown])
    return {int(i) for i in ids if i != 0}


def score_segments(output_channel, segmentation_patch, candidates: Iterable[int]) -> dict[int, float]:
    """Mean output over each candidate's voxels in the patch; absent candidates score 0."""
    out = np.asarray(getattr(output_channel, "data", output_channel), dtype=np.float64)
    seg = np.asarray(getattr(segmentation_patch, "data", segmentation_patch))
    ids = np.asarray(sorted(candidates), dtype=np.int64)
    if ids.size == 0:
        return {}
    flat_seg, flat_out = seg.ravel(), out.ravel()
    sel = np.isin(flat_seg, ids)
    lookup = np.searchsorted(ids, flat_seg[sel])
    sums = np.bincount(lookup, weights=flat_out[sel], minlength=ids.size)
    counts = np.bincount(lookup, minlength=ids.size)
    means = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    return {int(i): float(m) for i, m in zip(ids, means)}


def _best(scores: Mapping[int, float], exclude: Iterable[int] = ()) -> tuple[int, bool]:
    pool = {k: v for k, v in scores.items() if k not in set(exclude)}
    top = max(pool.values())
    winners = sorted(k for k, v in pool.items() if v == top)
    return winners[0], len(winners) > 1


def _resolve_diadic(pre_scores, post_scores):
    """Best pre != post pair by summed score; ties go to the lexicographically smallest."""
    best, pair, ties = -np.inf, None, 0
    for a in sorted(pre_scores):
        for b in sorted(post_scores):
            if a == b:
                continue
            s = pre_scores[a] + post_scores[b]
            if s > best:
                best, pair, ties = s, (a, b), 0
            elif s == best:
                ties += 1
    return pair, ties > 0


@dataclass
class _Forward:
    spec: PatchSpec
    seg_patch: np.ndarray
    prob: np.ndarray
    candidates: set[int] = field(default_factory=set)


def _forward(network, image, segmentation, cleft_mask, params: AssignParams, candidates=None) -> _Forward:
    mask = np.asarray(getattr(cleft_mask, "data", cleft_mask)).astype(bool)
    if not mask.any():
        raise ValueError("empty cleft")
    res = getattr(segmentation, "resolution", VoxelResolution())
    if candidates is None:
        candidates = candidate_segments(mask, segmentation, params.radius_nm, res)
    if not candidates:
        raise NoCandidatesError(
            f"no candidates: no segment within {params.radius_nm} nm of the cleft; dilation radius too small?"
        )
    center = centroid(mask.astype(np.uint8), 1)
    spec = PatchSpec(center, params.patch_shape, params.image_pad)
    img = extract_patch(image if isinstance(image, ScalarVolume) else ScalarVolume(image, res), spec).data
    seg = extract_patch(segmentation if isinstance(segmentation, LabelVolume) else LabelVolume(segmentation, res), spec).data
    m = extract_patch(BinaryVolume(mask, res), spec).data
    prob = forward_probabilities(network, np.stack([img, m.astype(np.float32)]))
    return _Forward(spec, seg, prob, set(candidates))


def _diadic_edge(cleft_id, fwd: _Forward) -> SynapseEdge:
    pre_scores = score_segments(fwd.prob[0], fwd.seg_patch, fwd.candidates)
    post_scores = score_segments(fwd.prob[1], fwd.seg_patch, fwd.candidates)
    pre, pre_tie = _best(pre_scores)
    post, post_tie = _best(post_scores)
    flags = []
    if pre_tie:
        flags.append("pre_tie")
    if post_tie:
        flags.append("post_tie")
    if pre == post:
        flags.append("pre_post_conflict")
        if len(fwd.candidates) < 2:
            raise NoCandidatesError(f"no candidates: cleft {cleft_id} touches a single segment")
        (pre, post), tie = _resolve_diadic(pre_scores, post_scores)
        if tie:
            flags.append("pair_tie")
    return SynapseEdge(cleft_id, (pre,), (post,), pre_scores, post_scores, tuple(flags), fwd.spec.center)


def _polyadic_edge(cleft_id, fwd: _Forward, threshold: float) -> SynapseEdge:
    pre_scores = score_segments(fwd.prob[0], fwd.seg_patch, fwd.candidates)
    post_scores = score_segments(fwd.prob[1], fwd.seg_patch, fwd.candidates)
    flags = []
    pre = [k for k, v in pre_scores.items() if v > threshold]
    post = [k for k, v in post_scores.items() if v > threshold]
    if not pre:
        pre = [_best(pre_scores)[0]]
        flags.append("pre_fallback")
    if not post:
        post = [_best(post_scores)[0]]
        flags.append("post_fallback")
    return SynapseEdge(cleft_id, tuple(pre), tuple(post), pre_scores, post_scores, tuple(flags), fwd.spec.center)


def assign_partners(network, image, segmentation, cleft_mask, cleft_id: int, params: AssignParams = AssignParams()) -> SynapseEdge:
    """Diadic assignment: argmax pre and post segments, smaller ID on ties.

    If both argmaxes pick the same segment the pair with the highest summed
    score among ``pre != post`` pairs is taken instead and the edge is flagged.
    """
    return _diadic_edge(cleft_id, _forward(network, image, segmentation, cleft_mask, params))


def assign_partners_polyadic(network, image, segmentation, cleft_mask, cleft_id: int, params: AssignParams) -> SynapseEdge:
    """Every candidate scoring above ``params.threshold``; argmax fallback for an empty side."""
    if params.threshold is None:
        raise ValueError("polyadic assignment needs a threshold in (0, 1)")
    return _polyadic_edge(cleft_id, _forward(network, image, segmentation, cleft_mask, params), params.threshold)


def assign_all(network, image, segmentation, cleft_labels, params: AssignParams = AssignParams(), cleft_ids=None, provenance=None) -> EdgeGraph:
    """Assign every cleft instance in ``cleft_labels``; clefts without candidates are skipped."""
    labels = np.asarray(getattr(cleft_labels, "data", cleft_labels))
    ids = cleft_ids if cleft_ids is not None else [int(i) for i in np.unique(labels) if i != 0]
    edges = []
    fn = assign_partners if params.threshold is None else assign_partners_polyadic
    for cid in ids:
        try:
            edges.append(fn(network, image, segmentation, labels == cid, cid, params))
        except NoCandidatesError as exc:
            logger.info("cleft %s skipped: %s", cid, exc)
    return EdgeGraph(edges, provenance)


class PartnerMaskOracle:
    """Stand-in network that emits the ground-truth partner masks.

    It recognises a cleft by its mask channel, so it answers exactly for
    windows centred on a (ground-truth-shaped) cleft's centroid. Unknown
    inputs produce an all-negative output.
    """

    def __init__(self, world: SyntheticWorld, patch_shape=DEFAULT_PATCH_SHAPE, logit: float = 20.0):
        self.logit = logit
        self.calls = 0
        self._table: dict[bytes, tuple[np.ndarray, np.ndarray]] = {}
        labels = world.cleft_labels
        for e in world.true_edges:
            mask = labels.data == e.cleft_id
            spec = PatchSpec(centroid(labels, e.cleft_id), patch_shape)
            key = np.packbits(extract_patch(BinaryVolume(mask, labels.resolution), spec).data).tobytes()
            seg = extract_patch(world.segmentation, spec).data
            self._table[key] = (np.isin(seg, e.pre_ids), np.isin(seg, e.post_ids))

    def __call__(self, x):
        self.calls += 1
        arr = x.detach().cpu().numpy() if hasattr(x, "detach") else np.asarray(x)
        out = np.full((arr.shape[0], 2) + arr.shape[2:], -self.logit, dtype=np.float32)
        for i, sample in enumerate(arr):
            hit = self._table.get(np.packbits(sample[1] > 0.5).tobytes())
            if hit is not None:
                out[i, 0][hit[0]] = self.logit
                out[i, 1][hit[1]] = self.logit
        return torch.from_numpy(out)


class AVANAssigner(BaseEstimator):
    """Trainable partner assigner with an sklearn-style interface.

    ``fit`` takes a sequence of rendered :class:`SyntheticWorld` objects and
    trains the mask network on windows centred on cleft voxels. ``predict``
    assigns every cleft of a world (ground-truth clefts by default, or a
    supplied instance map).
    """

    def __init__(
        self,
        width: int = 8,
        depth: int = 2,
        iterations: int = 1000,
        batch_size: int = 2,
        lr_schedule=((0, 1e-3),),
        radius_nm: float = 30.0,
        threshold: float | None = None,
        patch_shape=DEFAULT_PATCH_SHAPE,
        image_pad: float = 0.0,
        norm: str = "instance",
        seed: int = 0,
    ):
        self.width = width
        self.depth = depth
        self.iterations = iterations
        self.batch_size = batch_size
        self.lr_schedule = lr_schedule
        self.radius_nm = radius_nm
        self.threshold = threshold
        self.patch_shape = patch_shape
        self.image_pad = image_pad
        self.norm = norm
        self.seed = seed

    def net_config(self) -> NetConfig:
        return NetConfig(2, 2, self.width, self.depth, norm=self.norm, patch_shape=tuple(self.patch_shape),
                         seed=self.seed)

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(self.iterations, self.batch_size, tuple(self.lr_schedule), seed=self.seed)

    def assign_params(self) -> AssignParams:
        return AssignParams(self.radius_nm, self.threshold, tuple(self.patch_shape), self.image_pad)

    def fit(self, worlds: Sequence[SyntheticWorld], y=None, checkpoint_path=None, resume: bool = False):
        worlds = [check_world_has_image(w) for w in ([worlds] if isinstance(worlds, SyntheticWorld) else worlds)]
        sampler = CleftExampleSampler(worlds, tuple(self.patch_shape), self.image_pad)
        net = build_network(self.net_config())
        self.network_, self.loss_log_, info = run_training(net, sampler, self.schedule(),
                                                           checkpoint_path=checkpoint_path, resume=resume)
        self.deterministic_ = info["deterministic"]
        return self

    def set_network(self, network):
        """Use an already-trained (or oracle) network instead of fitting."""
        self.network_ = network
        self.loss_log_ = []
        return self

    def predict(self, world: SyntheticWorld, cleft_labels=None) -> EdgeGraph:
        check_is_fitted(self, "network_")
        world = check_world_has_image(world)
        labels = world.cleft_labels if cleft_labels is None else cleft_labels
        check_same_geometry(world.segmentation, labels)
        ids = world.cleft_ids() if cleft_labels is None else None
        return assign_all(
            self.network_, world.image, world.segmentation, labels, self.assign_params(), ids,
            {"assigner": "avan", **self.get_params()},
        )
