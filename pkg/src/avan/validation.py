"""Input checks shared by the estimators and the command-line layer."""
from __future__ import annotations

import numpy as np

from .volume import Volume


def check_same_geometry(*volumes) -> None:
    shapes = {tuple(np.shape(getattr(v, "data", v))) for v in volumes}
    if len(shapes) > 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def check_world_has_image(world):
    if getattr(world, "image", None) is None:
        raise ValueError("world has no rendered image; use synthgen.make_world or render_image first")
    check_same_geometry(world.image, world.segmentation, world.cleft_labels)
    return world


def check_unit_interval(values, name: str = "values", closed: bool = True) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    lo_ok = arr >= 0 if closed else arr > 0
    hi_ok = arr <= 1 if closed else arr < 1
    if not np.all(lo_ok & hi_ok):
        raise ValueError(f"{name} must lie in {'[0, 1]' if closed else '(0, 1)'}")
    return arr


def check_volume_kind(volume, kind: str):
    if not isinstance(volume, Volume) or volume.kind != kind:
        raise TypeError(f"expected a {kind} volume, got {type(volume).__name__}")
    return volume
