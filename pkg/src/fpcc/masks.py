"""Object-relevance voxel masks from axis-aligned boxes, and the focal loss."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from .errors import ConfigError, InvariantError, ShapeError
from .sparse import SparseVoxelTensor, keys_to_coords, linear_keys, write_tensor_text

FOCAL_EPS = 1e-7


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    z: float
    l: float  # noqa: E741
    w: float
    h: float

    def __post_init__(self):
        if min(self.l, self.w, self.h) <= 0:
            raise InvariantError(f"box sizes must be positive: {self}")

    @property
    def center(self) -> Tuple[float, float, float]:
        return (self.x, self.y, self.z)

    @property
    def size(self) -> Tuple[float, float, float]:
        return (self.l, self.w, self.h)


@dataclass(frozen=True)
class SceneSpec:
    extent: Tuple[float, float, float]  # metres (L, W, H)
    grid: Tuple[int, int, int]  # feature grid voxels (L4, W4, H4)
    expansion: int = 16

    def __post_init__(self):
        object.__setattr__(self, "extent", tuple(float(e) for e in self.extent))
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        if len(self.extent) != 3 or len(self.grid) != 3:
            raise ConfigError("scene extent and grid need three values each")
        if min(self.extent) <= 0 or min(self.grid) <= 0:
            raise ConfigError(f"scene extent and grid must be positive: {self}")
        if self.expansion < 0:
            raise ConfigError("expansion must be non-negative")

    def voxel_size(self) -> Tuple[float, float, float]:
        return tuple(e / g for e, g in zip(self.extent, self.grid))


class VoxelMask:
    """Set of relevant voxel coordinates, stored as sorted linear keys."""

    def __init__(self, keys: np.ndarray, grid: Sequence[int]):
        self.grid = tuple(int(g) for g in grid)
        keys = np.unique(np.asarray(keys, dtype=np.int64))
        if keys.size and (keys[0] < 0 or keys[-1] >= int(np.prod(self.grid))):
            raise InvariantError("mask voxel outside the grid")
        self.keys = keys

    @classmethod
    def from_coords(cls, coords, grid) -> "VoxelMask":
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        return cls(linear_keys(coords, grid), grid)

    @classmethod
    def empty(cls, grid) -> "VoxelMask":
        return cls(np.zeros(0, dtype=np.int64), grid)

    @property
    def coords(self) -> np.ndarray:
        return keys_to_coords(self.keys, self.grid)

    def __len__(self) -> int:
        return int(self.keys.size)

    def __contains__(self, uvw) -> bool:
        k = linear_keys(np.asarray(uvw).reshape(1, 3), self.grid)[0]
        i = np.searchsorted(self.keys, k)
        return bool(i < self.keys.size and self.keys[i] == k)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, VoxelMask)
            and self.grid == other.grid
            and np.array_equal(self.keys, other.keys)
        )

    def union(self, other: "VoxelMask") -> "VoxelMask":
        if other.grid != self.grid:
            raise ShapeError("mask grids differ")
        return VoxelMask(np.union1d(self.keys, other.keys), self.grid)

    def issubset(self, other: "VoxelMask") -> bool:
        return self.grid == other.grid and bool(np.isin(self.keys, other.keys).all())

    def to_tensor(self) -> SparseVoxelTensor:
        return SparseVoxelTensor(self.coords, np.ones((len(self), 1)), self.grid)


def _axis_range(center, size, scene_len, grid_len, expansion) -> range:
    """Voxel indices whose normalized position lies in the closed box interval."""
    lo = center / scene_len - size / (2 * scene_len) - expansion / grid_len
    hi = center / scene_len + size / (2 * scene_len) + expansion / grid_len
    # analytic guess, then settle on the exact float predicate (monotone in idx)
    a = min(max(math.ceil(lo * grid_len), 0), grid_len)
    while a > 0 and (a - 1) / grid_len >= lo:
        a -= 1
    while a < grid_len and a / grid_len < lo:
        a += 1
    b = min(max(math.floor(hi * grid_len), -1), grid_len - 1)
    while b < grid_len - 1 and (b + 1) / grid_len <= hi:
        b += 1
    while b >= 0 and b / grid_len > hi:
        b -= 1
    return range(a, b + 1) if a <= b else range(0)


def _box_voxels(box: BoundingBox, spec: SceneSpec, expansion: int) -> VoxelMask:
    axes = [
        _axis_range(c, s, L, G, expansion)
        for c, s, L, G in zip(box.center, box.size, spec.extent, spec.grid)
    ]
    if any(len(r) == 0 for r in axes):
        return VoxelMask.empty(spec.grid)
    u, v, w = (np.arange(r.start, r.stop, dtype=np.int64) for r in axes)
    G = spec.grid
    keys = ((u[:, None, None] * G[1] + v[None, :, None]) * G[2] + w[None, None, :]).reshape(-1)
    return VoxelMask(keys, G)


def preliminary_voxels(box: BoundingBox, spec: SceneSpec) -> VoxelMask:
    """Voxels whose index ratio falls inside the box's normalized extent."""
    return _box_voxels(box, spec, 0)


def expanded_voxels(box: BoundingBox, spec: SceneSpec, expansion=None) -> VoxelMask:
    """Box voxels widened by ``expansion`` voxels per side (default ``spec.expansion``)."""
    e = spec.expansion if expansion is None else expansion
    if e < 0:
        raise ConfigError("expansion must be non-negative")
    return _box_voxels(box, spec, e)


def merge_boxes(boxes: Iterable[BoundingBox], spec: SceneSpec, expansion=None) -> VoxelMask:
    masks = [expanded_voxels(b, spec, expansion).keys for b in boxes]
    if not masks:
        return VoxelMask.empty(spec.grid)
    return VoxelMask(np.concatenate(masks), spec.grid)


def brute_force_mask(boxes: Iterable[BoundingBox], spec: SceneSpec, expansion=None) -> VoxelMask:
    """Reference scan: test every grid voxel against every box directly."""
    e = spec.expansion if expansion is None else expansion
    G = spec.grid
    u, v, w = np.meshgrid(*(np.arange(g) for g in G), indexing="ij")
    ratios = [a.reshape(-1) / g for a, g in zip((u, v, w), G)]
    hit = np.zeros(int(np.prod(G)), dtype=bool)
    for box in boxes:
        inside = np.ones_like(hit)
        for r, c, s, L, g in zip(ratios, box.center, box.size, spec.extent, G):
            lo = c / L - s / (2 * L) - e / g
            hi = c / L + s / (2 * L) + e / g
            inside &= (r >= lo) & (r <= hi)
        hit |= inside
    return VoxelMask(np.flatnonzero(hit), G)


def sparse_labels(mask: VoxelMask, active) -> np.ndarray:
    """1/0 label per active voxel (rows of ``active`` in their given order)."""
    if isinstance(active, SparseVoxelTensor):
        if active.grid != mask.grid:
            raise ShapeError("tensor and mask grids differ")
        coords = active.coords
    else:
        coords = np.asarray(active, dtype=np.int64).reshape(-1, 3)
    return np.isin(linear_keys(coords, mask.grid), mask.keys).astype(np.int64)


def focal_loss(probs, labels, gamma: float = 2.0) -> float:
    """Summed binary focal loss; probabilities are clamped to [eps, 1-eps]."""
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if p.shape != y.shape:
        raise ShapeError(f"probs ({p.size}) and labels ({y.size}) differ in length")
    p = np.clip(p, FOCAL_EPS, 1.0 - FOCAL_EPS)
    pos = (1.0 - p) ** gamma * y * np.log(p)
    neg = p ** gamma * (1.0 - y) * np.log(1.0 - p)
    return float(-np.sum(pos + neg))


def read_boxes(path) -> List[BoundingBox]:
    boxes = []
    for ln in Path(path).read_text().splitlines():
        ln = ln.split("#", 1)[0].strip()
        if not ln:
            continue
        vals = [float(v) for v in ln.split()]
        if len(vals) != 6:
            raise ShapeError(f"box line needs 6 numbers 'x y z l w h': {ln!r}")
        boxes.append(BoundingBox(*vals))
    return boxes


def write_boxes(boxes: Iterable[BoundingBox], path) -> None:
    lines = [" ".join(repr(float(v)) for v in (b.x, b.y, b.z, b.l, b.w, b.h)) for b in boxes]
    Path(path).write_text("".join(ln + "\n" for ln in lines))


def write_mask(mask: VoxelMask, path) -> None:
    write_tensor_text(mask.to_tensor(), path)
