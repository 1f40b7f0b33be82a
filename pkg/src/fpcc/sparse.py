"""Sparse voxel tensors and the sparse 3D convolution variants.

Every convolution is a gather/GEMM/scatter over a kernel map: for each
kernel offset, find the (input, output) voxel pairs it connects, multiply the
gathered input rows by that offset's weight slice and add into the outputs.
Offsets are visited in lexicographic order so accumulation is deterministic.
"""
from __future__ import annotations

import io
import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from . import _backend
from .errors import AlignmentError, ConfigError, InvariantError, ShapeError

Grid = Tuple[int, int, int]


def linear_keys(coords: np.ndarray, grid: Sequence[int]) -> np.ndarray:
    """Row-major voxel index; sorting by it gives the canonical (w-minor) order."""
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    return (c[:, 0] * grid[1] + c[:, 1]) * grid[2] + c[:, 2]


def keys_to_coords(keys: np.ndarray, grid: Sequence[int]) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    w = keys % grid[2]
    uv = keys // grid[2]
    return np.stack([uv // grid[1], uv % grid[1], w], axis=1)


def in_grid(coords: np.ndarray, grid: Sequence[int]) -> np.ndarray:
    return np.all((coords >= 0) & (coords < np.asarray(grid)), axis=1)


@dataclass(frozen=True)
class SparseVoxelTensor:
    coords: np.ndarray  # (n, 3) int64, canonical order
    attrs: np.ndarray  # (n, c) float64
    grid: Grid

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        attrs = np.asarray(self.attrs, dtype=np.float64)
        if attrs.ndim == 1:
            attrs = attrs.reshape(-1, 1) if coords.shape[0] else attrs.reshape(0, 0)
        grid = tuple(int(g) for g in self.grid)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "attrs", attrs)
        object.__setattr__(self, "grid", grid)
        if len(grid) != 3 or min(grid) <= 0:
            raise ConfigError(f"grid extents must be three positive ints, got {grid}")
        if attrs.ndim != 2 or attrs.shape[0] != coords.shape[0]:
            raise ShapeError(f"attrs shape {attrs.shape} does not match {coords.shape[0]} voxels")
        if coords.shape[0]:
            if not in_grid(coords, grid).all():
                raise InvariantError("voxel coordinates outside the grid")
            keys = linear_keys(coords, grid)
            if np.any(np.diff(keys) <= 0):
                raise InvariantError("coordinates must be unique and in canonical order")

    @classmethod
    def build(cls, coords, attrs, grid) -> "SparseVoxelTensor":
        """Sort into canonical order; duplicate coordinates are an error."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        attrs = np.asarray(attrs, dtype=np.float64)
        if attrs.ndim != 2:
            attrs = attrs.reshape(coords.shape[0], -1)
        if coords.shape[0] and not in_grid(coords, grid).all():
            raise InvariantError("voxel coordinates outside the grid")
        keys = linear_keys(coords, grid)
        order = np.argsort(keys, kind="stable")
        if np.any(np.diff(keys[order]) == 0):
            raise InvariantError("duplicate voxel coordinates")
        return cls(coords[order], attrs[order], tuple(grid))

    @classmethod
    def empty(cls, grid, channels: int) -> "SparseVoxelTensor":
        return cls(np.zeros((0, 3), dtype=np.int64), np.zeros((0, channels)), tuple(grid))

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    @property
    def channels(self) -> int:
        return self.attrs.shape[1]

    @property
    def keys(self) -> np.ndarray:
        return linear_keys(self.coords, self.grid)

    def with_attrs(self, attrs) -> "SparseVoxelTensor":
        attrs = np.asarray(attrs, dtype=np.float64)
        if attrs.ndim != 2:
            attrs = attrs.reshape(self.n, -1)
        return SparseVoxelTensor(self.coords, attrs, self.grid)

    def select(self, rows) -> "SparseVoxelTensor":
        """Subset of voxels; ``rows`` is a mask or an increasing index array."""
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        rows = np.sort(rows)
        return SparseVoxelTensor(self.coords[rows], self.attrs[rows], self.grid)

    def same_active_set(self, other: "SparseVoxelTensor") -> bool:
        return self.grid == other.grid and np.array_equal(self.coords, other.coords)

    def equals(self, other: "SparseVoxelTensor") -> bool:
        return self.same_active_set(other) and np.array_equal(self.attrs, other.attrs)


@dataclass
class SparseKernel:
    weights: np.ndarray  # (k^3, c_in, c_out)
    size: int = 3
    stride: int = 1
    dilation: int = 1
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.size <= 0 or self.stride <= 0 or self.dilation <= 0:
            raise ConfigError("kernel size, stride and dilation must be positive")
        if self.weights.ndim != 3 or self.weights.shape[0] != self.size ** 3:
            raise ShapeError(
                f"weights must be ({self.size ** 3}, c_in, c_out), got {self.weights.shape}"
            )
        if not np.all(np.isfinite(self.weights)):
            raise InvariantError("kernel weights must be finite")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.c_out,):
                raise ShapeError(f"bias must have length {self.c_out}")

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def c_out(self) -> int:
        return self.weights.shape[2]

    @property
    def offsets(self) -> np.ndarray:
        return kernel_offsets(self.size)


def kernel_offsets(size: int) -> np.ndarray:
    """Lexicographic (du, dv, dw) offsets: centred for odd sizes, [0, k) for even."""
    if size % 2:
        r = size // 2
        axis = range(-r, r + 1)
    else:
        axis = range(size)
    return np.array(list(itertools.product(axis, axis, axis)), dtype=np.int64).reshape(-1, 3)


def _check_channels(t: SparseVoxelTensor, k: SparseKernel) -> None:
    if t.n and t.channels != k.c_in:
        raise ShapeError(f"kernel expects {k.c_in} input channels, tensor has {t.channels}")


def _lookup(sorted_keys: np.ndarray, coords: np.ndarray, grid: Grid) -> np.ndarray:
    """Row index of each coordinate in a canonical tensor, -1 if inactive or off-grid."""
    idx = np.full(coords.shape[0], -1, dtype=np.int64)
    ok = in_grid(coords, grid)
    if ok.any():
        idx[ok] = _backend.lookup_keys(sorted_keys, linear_keys(coords[ok], grid))
    return idx


def _apply_kernel_map(x, weights, pairs, n_out, bias):
    out = np.zeros((n_out, weights.shape[2]))
    for j, (src, dst) in enumerate(pairs):
        if src.size:
            # each output appears at most once per offset, so plain += is safe
            out[dst] += x[src] @ weights[j]
    if bias is not None:
        out += bias
    return out


def submanifold_conv(t: SparseVoxelTensor, k: SparseKernel) -> SparseVoxelTensor:
    """Stride-1 convolution evaluated only at (and gathering only from) active sites.

    Dilation spreads the taps; neighbours that are inactive or off-grid add zero.
    """
    if k.stride != 1:
        raise ConfigError("submanifold convolution requires stride 1")
    _check_channels(t, k)
    if t.n == 0:
        return SparseVoxelTensor.empty(t.grid, k.c_out)
    keys = t.keys
    pairs = []
    for d in k.offsets:
        src = _lookup(keys, t.coords + k.dilation * d, t.grid)
        dst = np.flatnonzero(src >= 0)
        pairs.append((src[dst], dst))
    out = _apply_kernel_map(t.attrs, k.weights, pairs, t.n, k.bias)
    return t.with_attrs(out)


def dilated_conv(t: SparseVoxelTensor, k: SparseKernel) -> SparseVoxelTensor:
    """Dilated variant; same active set as the input (submanifold semantics)."""
    return submanifold_conv(t, k)


def strided_conv(t: SparseVoxelTensor, k: SparseKernel) -> SparseVoxelTensor:
    """Downsampling convolution; output sites are the floor-divided input sites."""
    s = k.stride
    if s < 2:
        raise ConfigError("strided convolution requires stride >= 2")
    _check_channels(t, k)
    out_grid = tuple(-(-g // s) for g in t.grid)
    if t.n == 0:
        return SparseVoxelTensor.empty(out_grid, k.c_out)
    out_keys = np.unique(linear_keys(t.coords // s, out_grid))
    out_coords = keys_to_coords(out_keys, out_grid)
    keys = t.keys
    pairs = []
    for d in k.offsets:
        src = _lookup(keys, s * out_coords + k.dilation * d, t.grid)
        dst = np.flatnonzero(src >= 0)
        pairs.append((src[dst], dst))
    out = _apply_kernel_map(t.attrs, k.weights, pairs, out_coords.shape[0], k.bias)
    return SparseVoxelTensor(out_coords, out, out_grid)


def transposed_conv(
    t: SparseVoxelTensor,
    k: SparseKernel,
    out_coords: Optional[np.ndarray] = None,
    out_grid: Optional[Sequence[int]] = None,
) -> SparseVoxelTensor:
    """Upsampling convolution: voxel p scatters ``W[d] x_p`` to ``stride*p + d``.

    By default every in-grid scatter target becomes active. Passing
    ``out_coords`` (canonical order) restricts the output to that set, which
    is how a decoder inverts a matching strided convolution.
    """
    s = k.stride
    if s < 2:
        raise ConfigError("transposed convolution requires stride >= 2")
    _check_channels(t, k)
    grid = tuple(int(g) for g in out_grid) if out_grid is not None else tuple(s * g for g in t.grid)
    offsets = k.offsets * k.dilation
    if out_coords is None:
        if t.n == 0:
            return SparseVoxelTensor.empty(grid, k.c_out)
        targets = (s * t.coords[None, :, :] + offsets[:, None, :]).reshape(-1, 3)
        targets = targets[in_grid(targets, grid)]
        out_keys = np.unique(linear_keys(targets, grid))
        out_coords = keys_to_coords(out_keys, grid)
    else:
        out_coords = np.asarray(out_coords, dtype=np.int64).reshape(-1, 3)
        probe = SparseVoxelTensor(out_coords, np.zeros((out_coords.shape[0], 0)), grid)
        out_keys = probe.keys
    if out_coords.shape[0] == 0 or t.n == 0:
        out = np.zeros((out_coords.shape[0], k.c_out))
        if k.bias is not None and out_coords.shape[0]:
            out += k.bias
        return SparseVoxelTensor(out_coords, out, grid)
    pairs = []
    for d in offsets:
        dst = _lookup(out_keys, s * t.coords + d, grid)
        src = np.flatnonzero(dst >= 0)
        pairs.append((src, dst[src]))
    out = _apply_kernel_map(t.attrs, k.weights, pairs, out_coords.shape[0], k.bias)
    return SparseVoxelTensor(out_coords, out, grid)


def concat_channels(a: SparseVoxelTensor, b: SparseVoxelTensor) -> SparseVoxelTensor:
    if not a.same_active_set(b):
        raise AlignmentError(
            f"cannot concatenate: active sets differ ({a.n} vs {b.n} voxels, grids {a.grid} vs {b.grid})"
        )
    return a.with_attrs(np.hstack([a.attrs, b.attrs]))


def geometry_upscale(t: SparseVoxelTensor, mode: str = "children8") -> SparseVoxelTensor:
    """Double the grid. ``children8`` splits each voxel into its 8 children
    (attributes replicated); ``scale_only`` just doubles the coordinates."""
    grid = tuple(2 * g for g in t.grid)
    if mode == "scale_only":
        return SparseVoxelTensor(2 * t.coords, t.attrs.copy(), grid)
    if mode != "children8":
        raise ConfigError(f"unknown upscale mode {mode!r}")
    if t.n == 0:
        return SparseVoxelTensor.empty(grid, t.channels)
    children = kernel_offsets(2)
    coords = (2 * t.coords[:, None, :] + children[None, :, :]).reshape(-1, 3)
    attrs = np.repeat(t.attrs, 8, axis=0)
    # children of canonically ordered parents are not globally sorted
    return SparseVoxelTensor.build(coords, attrs, grid)


def voxelize(points, attrs, voxel_size, extent=None) -> SparseVoxelTensor:
    """Bucket points into voxels and average their attributes.

    ``extent`` (metres per axis, origin at zero) fixes the grid; without it the
    grid is the tightest one covering the occupied voxels.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    feats = np.asarray(attrs, dtype=np.float64).reshape(pts.shape[0], -1)
    size = np.asarray(voxel_size, dtype=np.float64)
    if size.ndim == 0:
        size = np.full(3, float(size))
    if size.shape != (3,) or np.any(size <= 0):
        raise ConfigError("voxel sizes must be three positive numbers")
    if extent is not None:
        ext = np.asarray(extent, dtype=np.float64)
        if np.any(pts < 0) or np.any(pts > ext):
            raise ConfigError("points fall outside the declared scene extent")
        grid = tuple(int(g) for g in np.maximum(np.ceil(ext / size), 1).astype(np.int64))
    else:
        grid = None
    if pts.shape[0] == 0:
        return SparseVoxelTensor.empty(grid or (1, 1, 1), feats.shape[1])
    idx = np.floor(pts / size).astype(np.int64)
    if grid is None:
        if np.any(idx < 0):
            raise ConfigError("negative coordinates need an explicit extent")
        grid = tuple(int(g) for g in idx.max(axis=0) + 1)
    else:
        # a point exactly on the far boundary belongs to the last voxel
        idx = np.minimum(idx, np.asarray(grid) - 1)
    keys = linear_keys(idx, grid)
    uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    sums = np.zeros((uniq.size, feats.shape[1]))
    np.add.at(sums, inverse, feats)
    return SparseVoxelTensor(keys_to_coords(uniq, grid), sums / counts[:, None], grid)


# -- text fixtures ---------------------------------------------------------

def format_tensor_text(t: SparseVoxelTensor) -> str:
    buf = io.StringIO()
    buf.write(f"{t.n} {t.channels} {t.grid[0]} {t.grid[1]} {t.grid[2]}\n")
    for c, a in zip(t.coords, t.attrs):
        vals = " ".join(repr(float(x)) for x in a)
        buf.write(f"{c[0]} {c[1]} {c[2]}" + (f" {vals}" if vals else "") + "\n")
    return buf.getvalue()


def parse_tensor_text(text: str) -> SparseVoxelTensor:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ShapeError("empty tensor text")
    head = lines[0].split()
    if len(head) != 5:
        raise ShapeError("tensor header must be 'n c L W H'")
    n, c = int(head[0]), int(head[1])
    grid = tuple(int(x) for x in head[2:])
    if len(lines) - 1 != n:
        raise ShapeError(f"header declares {n} voxels, found {len(lines) - 1} rows")
    coords = np.zeros((n, 3), dtype=np.int64)
    attrs = np.zeros((n, c))
    for i, ln in enumerate(lines[1:]):
        parts = ln.split()
        if len(parts) != 3 + c:
            raise ShapeError(f"row {i} has {len(parts)} fields, expected {3 + c}")
        coords[i] = [int(p) for p in parts[:3]]
        attrs[i] = [float(p) for p in parts[3:]]
    return SparseVoxelTensor.build(coords, attrs, grid)


def write_tensor_text(t: SparseVoxelTensor, path: Union[str, Path]) -> None:
    Path(path).write_text(format_tensor_text(t))


def read_tensor_text(path: Union[str, Path]) -> SparseVoxelTensor:
    return parse_tensor_text(Path(path).read_text())


def kernel_from_store(store, prefix: str, size: int, c_in: int, c_out: int, stride: int = 1,
                      dilation: int = 1, bias: bool = True) -> SparseKernel:
    """Declare (or fetch) ``prefix.w`` / ``prefix.b`` in a ParamStore as a kernel."""
    w = store.declare(f"{prefix}.w", (size ** 3, c_in, c_out))
    b = store.declare(f"{prefix}.b", (c_out,), "zeros") if bias else None
    return SparseKernel(w, size, stride, dilation, b)
