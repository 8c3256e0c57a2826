"""Volumetric containers and morphology primitives.

Every array is indexed ``(z, y, x)``. Physical distances are in nanometres and
always go through a :class:`VoxelResolution`, so anisotropic data (the usual
12 x 12 x 30 nm EM grid) is handled without directional bias.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import ClassVar, Union

import numpy as np
from scipy import ndimage

__all__ = [
    "VoxelResolution",
    "Volume",
    "ScalarVolume",
    "BinaryVolume",
    "LabelVolume",
    "PatchSpec",
    "DEFAULT_PATCH_SHAPE",
    "connected_components",
    "dilate",
    "ball_offsets",
    "centroid",
    "extract_patch",
    "overlap_counts",
    "save_volume",
    "load_volume",
]

DEFAULT_PATCH_SHAPE = (18, 80, 80)


@dataclass(frozen=True)
class VoxelResolution:
    """Nanometres per voxel along x, y and z."""

    dx: float = 12.0
    dy: float = 12.0
    dz: float = 30.0

    def __post_init__(self):
        if min(self.dx, self.dy, self.dz) <= 0:
            raise ValueError("voxel resolution must be strictly positive")

    @property
    def zyx(self) -> tuple[float, float, float]:
        return (float(self.dz), float(self.dy), float(self.dx))

    def to_dict(self) -> dict:
        return {"dx": float(self.dx), "dy": float(self.dy), "dz": float(self.dz)}

    @classmethod
    def from_dict(cls, d: dict) -> "VoxelResolution":
        return cls(dx=d["dx"], dy=d["dy"], dz=d["dz"])


@dataclass(frozen=True, eq=False)
class Volume:
    """Immutable 3D grid with a resolution and a placement offset.

    ``origin`` is the coordinate, in the parent volume's frame, of voxel
    ``[0, 0, 0]``. Whole volumes have origin ``(0, 0, 0)``; patches record
    where they were cut from.
    """

    data: np.ndarray
    resolution: VoxelResolution = field(default_factory=VoxelResolution)
    origin: tuple[int, int, int] = (0, 0, 0)

    kind: ClassVar[str] = "scalar"
    dtype: ClassVar[np.dtype] = np.dtype(np.float32)

    def __post_init__(self):
        arr = np.array(self.data, dtype=self.dtype, copy=True)
        if arr.ndim != 3:
            raise ValueError(f"{type(self).__name__} must be 3D, got shape {arr.shape}")
        self._validate(np.asarray(self.data))
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "origin", tuple(int(o) for o in self.origin))

    def _validate(self, raw: np.ndarray) -> None:
        pass

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray, origin=None):
        """Same kind and resolution, new values."""
        return type(self)(data, self.resolution, self.origin if origin is None else origin)

    def __repr__(self):
        return f"{type(self).__name__}(shape={self.shape}, resolution={self.resolution})"


class ScalarVolume(Volume):
    kind = "scalar"
    dtype = np.dtype(np.float32)


class BinaryVolume(Volume):
    kind = "binary"
    dtype = np.dtype(np.uint8)

    def _validate(self, raw):
        if raw.dtype != bool and raw.size and not np.isin(raw, (0, 1)).all():
            raise ValueError("binary volume values must be 0 or 1")


class LabelVolume(Volume):
    kind = "label"
    dtype = np.dtype(np.uint32)

    def _validate(self, raw):
        if raw.size and np.issubdtype(raw.dtype, np.number) and raw.min() < 0:
            raise ValueError("label IDs must be non-negative")
        if raw.size and np.issubdtype(raw.dtype, np.floating) and not np.all(raw == np.round(raw)):
            raise ValueError("label IDs must be integers")

    def ids(self) -> np.ndarray:
        ids = np.unique(self.data)
        return ids[ids != 0]


VolumeLike = Union[Volume, np.ndarray]
_KINDS = {"scalar": ScalarVolume, "binary": BinaryVolume, "label": LabelVolume}


def _array(v: VolumeLike) -> np.ndarray:
    return v.data if isinstance(v, Volume) else np.asarray(v)


def _resolution(v: VolumeLike, default: VoxelResolution | None = None) -> VoxelResolution:
    if isinstance(v, Volume):
        return v.resolution
    return default or VoxelResolution()


@dataclass(frozen=True)
class PatchSpec:
    """Window geometry: a voxel center and a ``(z, y, x)`` shape.

    For even dimensions the center sits at index ``dim // 2`` of the patch.
    """

    center: tuple[int, int, int]
    shape: tuple[int, int, int] = DEFAULT_PATCH_SHAPE
    pad_value: float = 0.0

    def __post_init__(self):
        if len(self.shape) != 3 or min(self.shape) <= 0:
            raise ValueError(f"patch shape must be three positive ints, got {self.shape}")
        object.__setattr__(self, "center", tuple(int(c) for c in self.center))
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))

    @property
    def start(self) -> tuple[int, int, int]:
        return tuple(c - s // 2 for c, s in zip(self.center, self.shape))


def connected_components(mask: VolumeLike, connectivity: int = 26) -> LabelVolume:
    """Label connected foreground regions.

    IDs start at 1 and follow the scan order ``(z, y, x)`` of each component's
    first voxel.
    """
    arr = _array(mask).astype(bool)
    if connectivity == 6:
        structure = ndimage.generate_binary_structure(3, 1)
    elif connectivity == 26:
        structure = ndimage.generate_binary_structure(3, 3)
    else:
        raise ValueError("connectivity must be 6 or 26")
    labels, n = ndimage.label(arr, structure=structure)
    if n:
        flat = labels.ravel()
        nz = np.flatnonzero(flat)
        ids, first = np.unique(flat[nz], return_index=True)
        order = ids[np.argsort(first, kind="stable")]
        remap = np.zeros(n + 1, dtype=np.uint32)
        remap[order] = np.arange(1, n + 1, dtype=np.uint32)
        labels = remap[labels]
    return LabelVolume(labels, _resolution(mask), getattr(mask, "origin", (0, 0, 0)))


def ball_offsets(radius_nm: float, resolution: VoxelResolution) -> np.ndarray:
    """Boolean structuring element of all offsets within ``radius_nm``."""
    if radius_nm < 0:
        raise ValueError("radius must be non-negative")
    res = np.array(resolution.zyx)
    half = np.floor(radius_nm / res).astype(int)
    grids = np.meshgrid(*[np.arange(-h, h + 1) for h in half], indexing="ij")
    d2 = sum((g * r) ** 2 for g, r in zip(grids, res))
    return d2 <= radius_nm**2 * (1 + 1e-12)


def dilate(mask: VolumeLike, radius_nm: float, resolution: VoxelResolution | None = None) -> BinaryVolume:
    """Grow a mask by a physical Euclidean radius.

    A voxel is set iff some foreground voxel lies within ``radius_nm``
    nanometres, measured with the voxel resolution.
    """
    res = resolution or _resolution(mask)
    arr = _array(mask).astype(bool)
    ball = ball_offsets(radius_nm, res)
    out = np.zeros_like(arr)
    if arr.any():
        half = np.array(ball.shape) // 2
        nz = np.nonzero(arr)
        lo = np.maximum([a.min() for a in nz] - half, 0)
        hi = np.minimum([a.max() + 1 for a in nz] + half, arr.shape)
        box = tuple(slice(a, b) for a, b in zip(lo, hi))
        out[box] = ndimage.binary_dilation(arr[box], structure=ball)
    return BinaryVolume(out, res, getattr(mask, "origin", (0, 0, 0)))


def centroid(labels: VolumeLike, label_id: int) -> tuple[int, int, int]:
    """Mean voxel coordinate of ``label_id``, rounded half-up per axis."""
    coords = np.nonzero(_array(labels) == label_id)
    n = coords[0].size
    if n == 0:
        raise KeyError(f"unknown label {label_id}")
    return tuple(int((2 * int(c.sum()) + n) // (2 * n)) for c in coords)


def extract_patch(volume: Volume, spec: PatchSpec) -> Volume:
    """Cut a fixed-shape window centered at ``spec.center``.

    Out-of-bounds voxels take ``spec.pad_value`` for scalar volumes and 0 for
    masks and labels. The returned patch's ``origin`` is its start corner in
    the source frame (possibly negative).
    """
    arr = _array(volume)
    if any(c < 0 or c >= n for c, n in zip(spec.center, arr.shape)):
        raise IndexError(f"center out of bounds: {spec.center} not in {arr.shape}")
    kind = volume.kind if isinstance(volume, Volume) else "scalar"
    pad = spec.pad_value if kind == "scalar" else 0
    out = np.full(spec.shape, pad, dtype=arr.dtype)
    start = spec.start
    src, dst = [], []
    for s, size, n in zip(start, spec.shape, arr.shape):
        a, b = max(s, 0), min(s + size, n)
        src.append(slice(a, b))
        dst.append(slice(a - s, b - s))
    out[tuple(dst)] = arr[tuple(src)]
    if isinstance(volume, Volume):
        return type(volume)(out, volume.resolution, start)
    return ScalarVolume(out, origin=start)


def overlap_counts(a: VolumeLike, b: VolumeLike) -> dict[tuple[int, int], int]:
    """Contingency table of voxel counts over nonzero ``(id_a, id_b)`` pairs."""
    aa, bb = _array(a), _array(b)
    if aa.shape != bb.shape:
        raise ValueError(f"shape mismatch: {aa.shape} vs {bb.shape}")
    both = (aa != 0) & (bb != 0)
    if not both.any():
        return {}
    pairs = np.stack([aa[both].astype(np.int64), bb[both].astype(np.int64)], axis=1)
    uniq, counts = np.unique(pairs, axis=0, return_counts=True)
    return {(int(i), int(j)): int(c) for (i, j), c in zip(uniq, counts)}


_DTYPE_CODES = {"f32": "<f4", "u8": "u1", "u32": "<u4"}
_KIND_DTYPE = {"scalar": "f32", "binary": "u8", "label": "u32"}


def save_volume(volume: Volume, path: str | Path) -> Path:
    """Write ``meta.json`` + ``data.raw`` (C order, little-endian) to a directory."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    code = _KIND_DTYPE[volume.kind]
    meta = {
        "shape": list(volume.shape),
        "axis_order": "zyx",
        "kind": volume.kind,
        "dtype": code,
        "resolution_nm": volume.resolution.to_dict(),
        "byte_order": "little",
        "origin": list(volume.origin),
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    raw = np.ascontiguousarray(volume.data, dtype=np.dtype(_DTYPE_CODES[code]))
    (path / "data.raw").write_bytes(raw.tobytes(order="C"))
    return path


def load_volume(path: str | Path) -> Volume:
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    if meta.get("axis_order", "zyx") != "zyx" or meta.get("byte_order", "little") != "little":
        raise ValueError(f"unsupported volume layout in {path}")
    dtype = np.dtype(_DTYPE_CODES[meta["dtype"]])
    data = np.frombuffer((path / "data.raw").read_bytes(), dtype=dtype).reshape(meta["shape"])
    cls = _KINDS[meta["kind"]]
    return cls(data, VoxelResolution.from_dict(meta["resolution_nm"]), tuple(meta.get("origin", (0, 0, 0))))
