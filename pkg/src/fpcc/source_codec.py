"""Edge-side compaction and cloud-side decompaction of F4-style features.

Channel compaction gates the 64 attribute channels with squeeze-and-excitation
weights and reduces them with a 1x1x1 conv. Spatial compaction scores each
voxel with a sparse U-Net and keeps the confident ones. Decompaction expands
back to 64 channels and re-gates them.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .errors import ConfigError, ShapeError
from .sparse import (
    SparseVoxelTensor,
    concat_channels,
    kernel_from_store,
    strided_conv,
    submanifold_conv,
    transposed_conv,
)
from .tensor_core import ParamStore, affine_norm, fc_forward, global_average_pool, sigmoid

FEATURE_CHANNELS = 64
SE_HIDDEN = 8
DECODER_SE_HIDDEN = 48
CHANNEL_CHOICES = (2, 4, 6, 8)
DOWN_CHANNELS = (16, 32, 64)
BOTTLENECK_CHANNELS = 128
UP_CHANNELS = (64, 32, 16)
MIN_UNET_EXTENT = 8
THRESHOLD = 0.5
FAILSAFE = 128


def _relu(x):
    return np.maximum(x, 0.0)


class _ConvNorm:
    """conv -> eval-mode BN -> ReLU on a sparse tensor."""

    def __init__(self, store, prefix, c_in, c_out):
        self.conv = kernel_from_store(store, f"{prefix}.conv", 3, c_in, c_out)
        self.norm = store.norm(f"{prefix}.bn", c_out)

    def __call__(self, t: SparseVoxelTensor) -> SparseVoxelTensor:
        y = submanifold_conv(t, self.conv)
        return y.with_attrs(_relu(affine_norm(self.norm, y.attrs)))


class CompactionModel:
    def __init__(self, store: Optional[ParamStore] = None, channels: int = 8, seed: int = 0):
        if channels not in CHANNEL_CHOICES:
            raise ConfigError(f"compacted channel count must be one of {CHANNEL_CHOICES}")
        self.store = store if store is not None else ParamStore(seed)
        self.channels = channels
        s = self.store
        self.se_reduce = s.linear("se_reduce", FEATURE_CHANNELS, SE_HIDDEN, "relu")
        self.se_expand = s.linear("se_expand", SE_HIDDEN, FEATURE_CHANNELS, "sigmoid")
        self.reduce_conv = kernel_from_store(s, "reduce_conv", 1, FEATURE_CHANNELS, channels)

        self.down = []
        c_prev = channels
        for i, c in enumerate(DOWN_CHANNELS, 1):
            p = f"unet.down{i}"
            self.down.append((
                _ConvNorm(s, f"{p}.l1", c_prev, c),
                _ConvNorm(s, f"{p}.l2", c, c),
                kernel_from_store(s, f"{p}.conv3", 2, c, c, stride=2),
            ))
            c_prev = c
        self.bottleneck = (
            _ConvNorm(s, "unet.bottleneck.l1", c_prev, BOTTLENECK_CHANNELS),
            _ConvNorm(s, "unet.bottleneck.l2", BOTTLENECK_CHANNELS, BOTTLENECK_CHANNELS),
        )
        c_prev = BOTTLENECK_CHANNELS
        self.up = []
        for i, (c, skip_c) in enumerate(zip(UP_CHANNELS, reversed(DOWN_CHANNELS)), 1):
            p = f"unet.up{i}"
            self.up.append((
                kernel_from_store(s, f"{p}.convT", 2, c_prev, c, stride=2),
                _ConvNorm(s, f"{p}.l1", c + skip_c, c),
                _ConvNorm(s, f"{p}.l2", c, c),
            ))
            c_prev = c
        self.head = kernel_from_store(s, "unet.head", 1, c_prev, 1)


@dataclass
class CompactedFeature:
    tensor: SparseVoxelTensor
    probs: np.ndarray
    failsafe: bool = False


def channel_weights(attrs: np.ndarray, reduce, expand) -> np.ndarray:
    return fc_forward(expand, fc_forward(reduce, global_average_pool(attrs)))[0]


def channel_compact(f4: SparseVoxelTensor, model: CompactionModel) -> SparseVoxelTensor:
    if f4.channels != FEATURE_CHANNELS:
        raise ShapeError(f"expected {FEATURE_CHANNELS} attribute channels, got {f4.channels}")
    if f4.n == 0:
        return SparseVoxelTensor.empty(f4.grid, model.channels)
    wc = channel_weights(f4.attrs, model.se_reduce, model.se_expand)
    return submanifold_conv(f4.with_attrs(f4.attrs * wc), model.reduce_conv)


def spatial_logits(fc: SparseVoxelTensor, model: CompactionModel) -> np.ndarray:
    if fc.channels != model.channels:
        raise ShapeError(f"expected {model.channels} channels, got {fc.channels}")
    if min(fc.grid) < MIN_UNET_EXTENT:
        raise ConfigError(f"grid {fc.grid} too small for three stride-2 stages")
    if fc.n == 0:
        return np.zeros(0)
    x = fc
    skips: List[SparseVoxelTensor] = []
    for l1, l2, down in model.down:
        x = l2(l1(x))
        skips.append(x)
        x = strided_conv(x, down)
    for layer in model.bottleneck:
        x = layer(x)
    for (convT, l1, l2), skip in zip(model.up, reversed(skips)):
        # the transposed conv lands exactly on the pre-downsampling active set
        x = transposed_conv(x, convT, out_coords=skip.coords, out_grid=skip.grid)
        x = l2(l1(concat_channels(x, skip)))
    return submanifold_conv(x, model.head).attrs[:, 0]


def spatial_probs(fc: SparseVoxelTensor, model: CompactionModel) -> np.ndarray:
    """Per-voxel relevance probability, aligned with ``fc``'s canonical order."""
    return sigmoid(spatial_logits(fc, model))


def spatial_compact_infer(fc: SparseVoxelTensor, probs, threshold: float = THRESHOLD,
                          failsafe: int = FAILSAFE) -> CompactedFeature:
    """Keep voxels with ``p > threshold``; if none survive, keep the ``failsafe``
    most confident (ties go to the earlier canonical voxel)."""
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    if p.size != fc.n:
        raise ShapeError(f"{p.size} probabilities for {fc.n} voxels")
    keep = np.flatnonzero(p > threshold)
    used_failsafe = False
    if keep.size == 0 and fc.n:
        used_failsafe = True
        order = np.argsort(-p, kind="stable")
        keep = np.sort(order[: min(failsafe, fc.n)])
    return CompactedFeature(fc.select(keep), p[keep], used_failsafe)


def spatial_compact_train_apply(fc: SparseVoxelTensor, probs) -> SparseVoxelTensor:
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    if p.size != fc.n:
        raise ShapeError(f"{p.size} probabilities for {fc.n} voxels")
    return fc.with_attrs(fc.attrs * p[:, None])


class DecompactionModel:
    def __init__(self, store: Optional[ParamStore] = None, channels: int = 8, seed: int = 0):
        self.store = store if store is not None else ParamStore(seed)
        self.channels = channels
        s = self.store
        self.se_reduce = s.linear("dse_reduce", channels, DECODER_SE_HIDDEN, "relu")
        self.se_expand = s.linear("dse_expand", DECODER_SE_HIDDEN, FEATURE_CHANNELS, "sigmoid")
        self.expand_conv = kernel_from_store(s, "expand_conv", 1, channels, FEATURE_CHANNELS)


def channel_decompact(f4hat_prime: SparseVoxelTensor, model: DecompactionModel) -> SparseVoxelTensor:
    if f4hat_prime.channels != model.channels:
        raise ShapeError(f"expected {model.channels} channels, got {f4hat_prime.channels}")
    if f4hat_prime.n == 0:
        return SparseVoxelTensor.empty(f4hat_prime.grid, FEATURE_CHANNELS)
    wc = channel_weights(f4hat_prime.attrs, model.se_reduce, model.se_expand)
    expanded = submanifold_conv(f4hat_prime, model.expand_conv)
    return expanded.with_attrs(expanded.attrs * wc)


def compaction_dims(n: int, n_prime: int, channels: int) -> Tuple[int, int]:
    """(input dims, output dims) with 3 coordinate columns on each side."""
    return n * (3 + FEATURE_CHANNELS), n_prime * (3 + channels)
