"""Cleft detection networks and voxel-to-instance conversion."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .model import NetConfig, TrainSchedule, build_network, run_training
from .synthgen import SyntheticWorld
from .targets import SignedProximityParams, cleft_mask_target, signed_proximity_target
from .validation import check_world_has_image
from .volume import DEFAULT_PATCH_SHAPE, LabelVolume, PatchSpec, ScalarVolume, connected_components, extract_patch

__all__ = [
    "DetectParams",
    "REPRESENTATIONS",
    "tile_starts",
    "predict_cleft_voxels",
    "cleft_instances",
    "DetectorSampler",
    "CleftDetector",
    "GroundTruthDetector",
]

REPRESENTATIONS = ("mask", "signed_proximity")


@dataclass(frozen=True)
class DetectParams:
    representation: str = "mask"
    threshold: float = 0.5
    min_size: int = 0
    tile_shape: tuple[int, int, int] = DEFAULT_PATCH_SHAPE
    overlap: tuple[int, int, int] = (4, 16, 16)

    def __post_init__(self):
        if self.representation not in REPRESENTATIONS:
            raise ValueError(f"representation must be one of {REPRESENTATIONS}")
        if self.representation == "mask" and not 0 < self.threshold < 1:
            raise ValueError("mask threshold must lie in (0, 1)")
        if self.representation == "signed_proximity" and not 0 < self.threshold <= 1:
            raise ValueError("proximity threshold must lie in (0, 1]")
        if self.min_size < 0:
            raise ValueError("min_size must be >= 0")
        if any(o < 0 or o >= t for o, t in zip(self.overlap, self.tile_shape)):
            raise ValueError("overlap must be non-negative and smaller than the tile")


def tile_starts(n: int, tile: int, overlap: int) -> list[int]:
    """Tile origins along one axis: stride ``tile - overlap``, last tile flush with the end."""
    if n < tile:
        raise ValueError(f"volume smaller than tile: {n} < {tile}")
    stride = tile - overlap
    starts = list(range(0, n - tile + 1, stride))
    if starts[-1] != n - tile:
        starts.append(n - tile)
    return starts


def _head(out: torch.Tensor, representation: str) -> torch.Tensor:
    return torch.sigmoid(out) if representation == "mask" else torch.tanh(out / 2)


def predict_cleft_voxels(network, image, params: DetectParams = DetectParams()) -> ScalarVolume:
    """Whole-volume prediction from overlapping tiles, overlap-averaged.

    Values are probabilities for the mask representation and lie in [-1, 1]
    (``tanh(logit / 2)``, i.e. ``2 * sigmoid - 1``) for signed proximity.
    """
    arr = np.asarray(getattr(image, "data", image), dtype=np.float32)
    res = getattr(image, "resolution", None)
    starts = [tile_starts(n, t, o) for n, t, o in zip(arr.shape, params.tile_shape, params.overlap)]
    acc = np.zeros(arr.shape, dtype=np.float64)
    weight = np.zeros(arr.shape, dtype=np.float64)
    tz, ty, tx = params.tile_shape
    with torch.no_grad():
        for z in starts[0]:
            for y in starts[1]:
                for x in starts[2]:
                    sl = (slice(z, z + tz), slice(y, y + ty), slice(x, x + tx))
                    inp = torch.from_numpy(np.ascontiguousarray(arr[sl]))[None, None]
                    out = _head(torch.as_tensor(network(inp)), params.representation)[0, 0].numpy()
                    acc[sl] += out
                    weight[sl] += 1.0
    pred = (acc / weight).astype(np.float32)
    return ScalarVolume(pred, res) if res is not None else ScalarVolume(pred)


def cleft_instances(prediction, params: DetectParams) -> LabelVolume:
    """Threshold, 26-connected components, drop components smaller than ``min_size``."""
    arr = np.asarray(getattr(prediction, "data", prediction))
    value = np.abs(arr) if params.representation == "signed_proximity" else arr
    labels = connected_components(value >= params.threshold, connectivity=26).data
    if params.min_size > 0 and labels.any():
        sizes = np.bincount(labels.ravel())
        small = sizes < params.min_size
        small[0] = False
        labels = labels.copy()
        labels[small[labels]] = 0
        labels = connected_components(labels > 0, connectivity=26).data
    res = getattr(prediction, "resolution", None)
    return LabelVolume(labels, res) if res is not None else LabelVolume(labels)


class DetectorSampler:
    """Image windows with their target, half of them centred on a cleft voxel."""

    def __init__(self, worlds: Sequence[SyntheticWorld], representation: str = "mask",
                 patch_shape=DEFAULT_PATCH_SHAPE, image_pad: float = 0.0, prox=SignedProximityParams(),
                 positive_fraction: float = 0.5):
        self.items = []
        for w in worlds:
            check_world_has_image(w)
            if representation == "mask":
                target = cleft_mask_target(w).data.astype(np.float32)
            else:
                target = (signed_proximity_target(w, prox).data + 1.0) / 2.0
            self.items.append((w, ScalarVolume(target, w.resolution), np.argwhere(w.cleft_labels.data > 0)))
        self.patch_shape = patch_shape
        self.image_pad = image_pad
        self.positive_fraction = positive_fraction
        self.representation = representation

    def __call__(self, rng: np.random.Generator):
        w, target, coords = self.items[rng.integers(len(self.items))]
        if len(coords) and rng.random() < self.positive_fraction:
            center = tuple(int(v) for v in coords[rng.integers(len(coords))])
        else:
            center = tuple(int(rng.integers(n)) for n in w.shape)
        spec = PatchSpec(center, self.patch_shape, self.image_pad)
        img = extract_patch(w.image, spec).data
        # padded target voxels are background: 0 for masks, 0.5 (= proximity 0) otherwise
        tgt = extract_patch(target, PatchSpec(center, self.patch_shape, 0.0 if self.representation == "mask" else 0.5)).data
        return img[None], tgt[None]


def _logit_bce(prediction, target):
    # the proximity target arrives rescaled to [0, 1], so both representations share one loss
    return F.binary_cross_entropy_with_logits(prediction, target)


class CleftDetector(BaseEstimator):
    """Voxelwise cleft detector with instance extraction.

    ``predict_proba`` returns the dense prediction, ``predict`` the instance
    map at the configured threshold and size filter.
    """

    def __init__(
        self,
        representation: str = "mask",
        width: int = 8,
        depth: int = 2,
        iterations: int = 1000,
        batch_size: int = 2,
        lr_schedule=((0, 1e-3),),
        threshold: float = 0.5,
        min_size: int = 0,
        d_max: float = 120.0,
        patch_shape=DEFAULT_PATCH_SHAPE,
        overlap=(4, 16, 16),
        image_pad: float = 0.0,
        norm: str = "instance",
        seed: int = 0,
    ):
        self.representation = representation
        self.width = width
        self.depth = depth
        self.iterations = iterations
        self.batch_size = batch_size
        self.lr_schedule = lr_schedule
        self.threshold = threshold
        self.min_size = min_size
        self.d_max = d_max
        self.patch_shape = patch_shape
        self.overlap = overlap
        self.image_pad = image_pad
        self.norm = norm
        self.seed = seed

    def detect_params(self, **overrides) -> DetectParams:
        kw = dict(representation=self.representation, threshold=self.threshold, min_size=self.min_size,
                  tile_shape=tuple(self.patch_shape), overlap=tuple(self.overlap))
        kw.update(overrides)
        return DetectParams(**kw)

    def net_config(self) -> NetConfig:
        return NetConfig(1, 1, self.width, self.depth, norm=self.norm, patch_shape=tuple(self.patch_shape), seed=self.seed)

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(self.iterations, self.batch_size, tuple(self.lr_schedule), seed=self.seed)

    def fit(self, worlds: Sequence[SyntheticWorld], y=None, checkpoint_path=None, resume: bool = False):
        worlds = [worlds] if isinstance(worlds, SyntheticWorld) else list(worlds)
        self.detect_params()
        sampler = DetectorSampler(worlds, self.representation, tuple(self.patch_shape), self.image_pad,
                                  SignedProximityParams(self.d_max))
        self.network_, self.loss_log_, info = run_training(
            build_network(self.net_config()), sampler, self.schedule(), loss_fn=_logit_bce,
            checkpoint_path=checkpoint_path, resume=resume,
        )
        self.deterministic_ = info["deterministic"]
        return self

    def set_network(self, network):
        self.network_ = network
        self.loss_log_ = []
        return self

    def predict_proba(self, image) -> ScalarVolume:
        check_is_fitted(self, "network_")
        if isinstance(self.network_, GroundTruthDetector):
            return self.network_.prediction(image)
        return predict_cleft_voxels(self.network_, image, self.detect_params())

    def predict(self, image, **overrides) -> LabelVolume:
        return cleft_instances(self.predict_proba(image), self.detect_params(**overrides))


class GroundTruthDetector:
    """Detector stand-in whose dense prediction is a world's true cleft mask."""

    def __init__(self, world: SyntheticWorld):
        self.world = world

    def prediction(self, image=None) -> ScalarVolume:
        return ScalarVolume((self.world.cleft_labels.data > 0).astype(np.float32), self.world.resolution)

    def __call__(self, x):
        raise TypeError("GroundTruthDetector has no patchwise forward; use prediction()")
