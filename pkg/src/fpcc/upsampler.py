"""Cloud-side diffusion upsampling of the reconstructed F4 feature to F3 resolution.

A prompt branch lifts the decoded tensor to the doubled grid; noisy geometry
and attributes are fused with the normalized prompts, a time embedding is
added, and per-branch sparse conv stacks predict the noise that is then
subtracted. With one step the denoised value is simply ``x1 - eps_hat``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, InvariantError, ShapeError
from .geometry import channel_rng
from .sparse import (
    SparseVoxelTensor,
    dilated_conv,
    geometry_upscale,
    kernel_from_store,
    linear_keys,
    submanifold_conv,
)
from .tensor_core import ParamStore, affine_norm, as_matrix, fc_forward

ATTR_WIDTH = 64
GEOM_WIDTH = 3
BRANCHES = ("geometry", "attribute")
OUTPUT_MODES = ("anchored", "free")
NOISE_STREAM = 0xD1FF


def _branch_width(branch: str) -> int:
    if branch == "geometry":
        return GEOM_WIDTH
    if branch == "attribute":
        return ATTR_WIDTH
    raise ConfigError(f"unknown branch {branch!r}")


class _PromptStage:
    def __init__(self, store, prefix):
        self.dil = kernel_from_store(store, f"{prefix}.dil", 3, ATTR_WIDTH, ATTR_WIDTH, dilation=2)
        self.bn1 = store.norm(f"{prefix}.bn1", ATTR_WIDTH)
        self.sub = kernel_from_store(store, f"{prefix}.sub", 3, ATTR_WIDTH, ATTR_WIDTH)
        self.bn2 = store.norm(f"{prefix}.bn2", ATTR_WIDTH)

    def __call__(self, t: SparseVoxelTensor) -> SparseVoxelTensor:
        y = dilated_conv(t, self.dil)
        y = y.with_attrs(np.maximum(affine_norm(self.bn1, y.attrs), 0.0))
        y = submanifold_conv(y, self.sub)
        return y.with_attrs(np.maximum(affine_norm(self.bn2, y.attrs), 0.0))


class UpsamplerModel:
    """Parameter bundle; fusion hidden width equals the branch output width."""

    def __init__(self, store: Optional[ParamStore] = None, seed: int = 0,
                 upscale_mode: str = "children8"):
        self.store = store if store is not None else ParamStore(seed)
        self.upscale_mode = upscale_mode
        s = self.store
        self.prompt1 = _PromptStage(s, "prompt1")
        self.prompt2 = _PromptStage(s, "prompt2")
        self.fuse = {}
        self.time = {}
        self.pred = {}
        for branch, tag in (("geometry", "g"), ("attribute", "a")):
            w = _branch_width(branch)
            self.fuse[branch] = (
                s.linear(f"fuse_{tag}.fc_r", 2 * w, w, "relu"),
                s.linear(f"fuse_{tag}.fc", w, w),
            )
            self.time[branch] = (
                s.linear(f"time_{tag}.fc_si", 1, w, "silu"),
                s.linear(f"time_{tag}.fc", w, w),
            )
            self.pred[branch] = [kernel_from_store(s, f"pred_{tag}.conv{i}", 3, w, w) for i in (1, 2, 3)]


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    domain: str

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if self.mean.shape != self.std.shape:
            raise ShapeError("mean and std lengths differ")
        if not np.all(self.std > 0):
            raise InvariantError("normalization std must be strictly positive")
        if self.domain not in BRANCHES:
            raise ConfigError(f"unknown stats domain {self.domain!r}")

    @classmethod
    def identity(cls, channels: int, domain: str) -> "NormStats":
        return cls(np.zeros(channels), np.ones(channels), domain)

    @classmethod
    def from_data(cls, values, domain: str, floor: float = 1e-8) -> "NormStats":
        v = as_matrix(values)
        if v.shape[0] == 0:
            raise ShapeError("cannot calibrate stats on empty data")
        return cls(v.mean(axis=0), np.maximum(v.std(axis=0), floor), domain)

    def to_dict(self) -> dict:
        return {"domain": self.domain, "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(d["mean"], d["std"], d["domain"])


def default_stats(grid):
    """Stats used without calibration: uniform-occupancy moments for the
    doubled-grid coordinates, identity for attributes."""
    g = np.asarray(grid, dtype=np.float64) * 2
    return (NormStats((g - 1) / 2, g / np.sqrt(12.0), "geometry"),
            NormStats.identity(ATTR_WIDTH, "attribute"))


def save_stats(stats_g: NormStats, stats_a: NormStats, path) -> None:
    Path(path).write_text(json.dumps([stats_g.to_dict(), stats_a.to_dict()], indent=1))


def load_stats(path):
    g, a = (NormStats.from_dict(d) for d in json.loads(Path(path).read_text()))
    return g, a


def normalize(values, stats: NormStats) -> np.ndarray:
    v = as_matrix(values)
    if v.shape[1] != stats.mean.size:
        raise ShapeError(f"stats have {stats.mean.size} channels, values have {v.shape[1]}")
    if not np.all(stats.std > 0):
        raise InvariantError("normalization std must be strictly positive")
    return (v - stats.mean) / stats.std


def denormalize(values, stats: NormStats) -> np.ndarray:
    v = as_matrix(values)
    if v.shape[1] != stats.mean.size:
        raise ShapeError(f"stats have {stats.mean.size} channels, values have {v.shape[1]}")
    return v * stats.std + stats.mean


@dataclass(frozen=True)
class DiffusionConfig:
    steps: int = 1
    noise_seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("diffusion needs at least one step")


def prompt_generate(f4hat: SparseVoxelTensor, model: UpsamplerModel) -> SparseVoxelTensor:
    if f4hat.channels != ATTR_WIDTH and f4hat.n:
        raise ShapeError(f"prompt generation expects {ATTR_WIDTH} channels, got {f4hat.channels}")
    x = model.prompt1(f4hat)
    x = geometry_upscale(x, model.upscale_mode)
    return model.prompt2(x)


def prompt_parts(prompt: SparseVoxelTensor):
    """(geometry prompt as float coordinates, attribute prompt)."""
    return prompt.coords.astype(np.float64), prompt.attrs


def calibrate_stats(prompts):
    """Geometry and attribute stats pooled over a set of prompt tensors."""
    prompts = [p for p in prompts if p.n]
    g = np.vstack([p.coords.astype(np.float64) for p in prompts])
    a = np.vstack([p.attrs for p in prompts])
    return NormStats.from_data(g, "geometry"), NormStats.from_data(a, "attribute")


def conditional_fuse(prompt_part, noisy_part, branch: str, model: UpsamplerModel) -> np.ndarray:
    w = _branch_width(branch)
    p, q = as_matrix(prompt_part, "prompt"), as_matrix(noisy_part, "noisy")
    if p.shape[0] != q.shape[0]:
        raise ShapeError("prompt and noisy parts must have the same number of rows")
    if p.shape[1] != w or q.shape[1] != w:
        raise ShapeError(f"{branch} fusion expects {w}+{w} columns, got {p.shape[1]}+{q.shape[1]}")
    fc_r, fc = model.fuse[branch]
    return fc_forward(fc, fc_forward(fc_r, np.hstack([p, q])))


def time_embedding(t: float, model: UpsamplerModel, branch: str = "attribute", steps: int = 1) -> np.ndarray:
    if t < 0:
        raise ConfigError("timestep must be non-negative")
    fc_si, fc = model.time[branch]
    return fc_forward(fc, fc_forward(fc_si, np.array([[t / steps]])))[0]


def predict_noise(branch: str, fused: SparseVoxelTensor, t_embed, model: UpsamplerModel) -> np.ndarray:
    """Three submanifold convs (ReLU between) over ``fused.attrs + t_embed``."""
    w = _branch_width(branch)
    if fused.channels != w:
        raise ShapeError(f"{branch} predictor expects {w} channels, got {fused.channels}")
    te = np.asarray(t_embed, dtype=np.float64).reshape(-1)
    if te.size != w:
        raise ShapeError(f"time embedding width {te.size} != {w}")
    x = fused.with_attrs(fused.attrs + te)
    convs = model.pred[branch]
    for i, k in enumerate(convs):
        x = submanifold_conv(x, k)
        if i < len(convs) - 1:
            x = x.with_attrs(np.maximum(x.attrs, 0.0))
    return x.attrs


def upsample(f4hat: SparseVoxelTensor, model: UpsamplerModel, stats_g: NormStats, stats_a: NormStats,
             cfg: DiffusionConfig = DiffusionConfig(), mode: str = "anchored") -> SparseVoxelTensor:
    """Generate the F3-resolution feature.

    ``anchored``: coordinates are the prompt's integer voxels, attributes are
    the 3 denoised geometry columns followed by the 64 denoised attributes.
    ``free``: denoised geometry is rounded to voxels (clipped, first
    occurrence kept) and carries only the 64 attributes.
    """
    if mode not in OUTPUT_MODES:
        raise ConfigError(f"unknown output mode {mode!r}")
    prompt = prompt_generate(f4hat, model)
    n = prompt.n
    if n == 0:
        width = ATTR_WIDTH + (GEOM_WIDTH if mode == "anchored" else 0)
        return SparseVoxelTensor.empty(prompt.grid, width)
    pg, pa = prompt_parts(prompt)
    pg_n, pa_n = normalize(pg, stats_g), normalize(pa, stats_a)
    rng = channel_rng(cfg.noise_seed, NOISE_STREAM)
    x_g = rng.standard_normal((n, GEOM_WIDTH))
    x_a = rng.standard_normal((n, ATTR_WIDTH))
    for m in range(cfg.steps, 0, -1):
        f_g = conditional_fuse(pg_n, x_g, "geometry", model)
        f_a = conditional_fuse(pa_n, x_a, "attribute", model)
        e_g = predict_noise("geometry", prompt.with_attrs(f_g),
                            time_embedding(m, model, "geometry", cfg.steps), model)
        e_a = predict_noise("attribute", prompt.with_attrs(f_a),
                            time_embedding(m, model, "attribute", cfg.steps), model)
        x_g = x_g - e_g
        x_a = x_a - e_a
    geom = denormalize(x_g, stats_g)
    attrs = denormalize(x_a, stats_a)
    if mode == "anchored":
        return prompt.with_attrs(np.hstack([geom, attrs]))
    coords = np.clip(np.rint(geom), 0, np.asarray(prompt.grid) - 1).astype(np.int64)
    _, first = np.unique(linear_keys(coords, prompt.grid), return_index=True)
    return SparseVoxelTensor.build(coords[first], attrs[first], prompt.grid)
