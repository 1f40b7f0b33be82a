"""Dense numeric substrate: FC layers with analytic gradients, pooling,
frozen affine normalization, seeded initialization and a flat parameter file.

Matrices are plain 2-D ``float64`` numpy arrays; nothing here allocates a
graph or tracks gradients implicitly.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, EmptyInputError, InvariantError, ShapeError

LEAKY_SLOPE = 0.01
ACTIVATIONS = ("none", "relu", "leaky_relu", "sigmoid", "silu")
INIT_SCHEMES = ("fan_in_uniform", "zeros", "ones", "normal")

PARAM_MAGIC = b"FPCW"
PARAM_VERSION = 1


def as_matrix(x, name: str = "input") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-D matrix, got shape {a.shape}")
    return a


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "none":
        return z
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "leaky_relu":
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    if kind == "sigmoid":
        return sigmoid(z)
    if kind == "silu":
        return z * sigmoid(z)
    raise ConfigError(f"unknown activation {kind!r}")


def activation_grad(z: np.ndarray, kind: str) -> np.ndarray:
    """Derivative of ``activate(z, kind)`` with respect to ``z``."""
    if kind == "none":
        return np.ones_like(z)
    if kind == "relu":
        return (z > 0).astype(np.float64)
    if kind == "leaky_relu":
        return np.where(z > 0, 1.0, LEAKY_SLOPE)
    if kind == "sigmoid":
        s = sigmoid(z)
        return s * (1.0 - s)
    if kind == "silu":
        s = sigmoid(z)
        return s * (1.0 + z * (1.0 - s))
    raise ConfigError(f"unknown activation {kind!r}")


@dataclass
class LinearLayer:
    weight: np.ndarray  # (c_in, c_out)
    bias: np.ndarray  # (c_out,)
    activation: str = "none"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2:
            raise ShapeError(f"weight must be 2-D, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(
                f"bias length {self.bias.shape} does not match weight cols {self.weight.shape[1]}"
            )

    @property
    def c_in(self) -> int:
        return self.weight.shape[0]

    @property
    def c_out(self) -> int:
        return self.weight.shape[1]


def _check_fc_input(layer: LinearLayer, x: np.ndarray) -> np.ndarray:
    x = as_matrix(x)
    if x.shape[1] != layer.c_in:
        raise ShapeError(f"FC expects {layer.c_in} input columns, got {x.shape[1]}")
    return x


def fc_forward(layer: LinearLayer, x) -> np.ndarray:
    x = _check_fc_input(layer, x)
    return activate(x @ layer.weight + layer.bias, layer.activation)


def fc_backward(
    layer: LinearLayer, x, grad_out
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a scalar objective through one FC layer.

    Returns ``(grad_input, grad_weight, grad_bias)`` given the gradient with
    respect to the layer output.
    """
    x = _check_fc_input(layer, x)
    g = as_matrix(grad_out, "grad_out")
    if g.shape != (x.shape[0], layer.c_out):
        raise ShapeError(f"grad_out shape {g.shape} != {(x.shape[0], layer.c_out)}")
    z = x @ layer.weight + layer.bias
    gz = g * activation_grad(z, layer.activation)
    return gz @ layer.weight.T, x.T @ gz, gz.sum(axis=0)


def global_average_pool(attrs) -> np.ndarray:
    a = as_matrix(attrs, "attrs")
    if a.shape[0] == 0:
        raise EmptyInputError("global average pool of an empty matrix")
    return a.mean(axis=0)


@dataclass
class AffineNorm:
    """Eval-mode batch norm: ``x * scale + shift`` per channel."""

    scale: np.ndarray
    shift: np.ndarray

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.shift = np.asarray(self.shift, dtype=np.float64)
        if self.scale.shape != self.shift.shape or self.scale.ndim != 1:
            raise ShapeError("scale and shift must be equal-length vectors")
        if not np.all(self.scale > 0):
            raise InvariantError("affine norm scale must be strictly positive")

    @classmethod
    def identity(cls, channels: int) -> "AffineNorm":
        return cls(np.ones(channels), np.zeros(channels))


def affine_norm(norm: AffineNorm, attrs) -> np.ndarray:
    a = as_matrix(attrs, "attrs")
    if a.shape[1] != norm.scale.shape[0]:
        raise ShapeError(f"norm has {norm.scale.shape[0]} channels, input has {a.shape[1]}")
    if not np.all(norm.scale > 0):
        raise InvariantError("affine norm scale must be strictly positive")
    return a * norm.scale + norm.shift


def fan_in(shape: Sequence[int]) -> int:
    """Fan-in of a parameter laid out as (..., c_in, c_out) or a plain vector."""
    if len(shape) == 1:
        return int(shape[0])
    return int(np.prod(shape[:-1]))


def seeded_init(shape, seed: int, scheme: str = "fan_in_uniform") -> np.ndarray:
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if not shape or any(s <= 0 for s in shape):
        raise ConfigError(f"dimensions must be positive, got {shape}")
    if scheme not in INIT_SCHEMES:
        raise ConfigError(f"unknown init scheme {scheme!r}")
    if scheme == "zeros":
        return np.zeros(shape)
    if scheme == "ones":
        return np.ones(shape)
    rng = np.random.default_rng(seed)
    if scheme == "normal":
        return rng.standard_normal(shape)
    bound = 1.0 / np.sqrt(fan_in(shape))
    return rng.uniform(-bound, bound, size=shape)


def _name_seed(seed: int, name: str) -> int:
    # per-name stream so arrays do not depend on declaration order
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


class ParamStore:
    """Ordered map of named float64 arrays plus the seed that produced them."""

    def __init__(self, seed: int = 0, init_scheme: str = "fan_in_uniform"):
        if init_scheme not in INIT_SCHEMES:
            raise ConfigError(f"unknown init scheme {init_scheme!r}")
        self.seed = int(seed)
        self.init_scheme = init_scheme
        self.arrays: Dict[str, np.ndarray] = {}
        # loaded stores refuse to invent missing parameters
        self.strict = False

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __setitem__(self, name: str, value) -> None:
        value = np.array(value, dtype=np.float64)
        if name in self.arrays and self.arrays[name].shape != value.shape:
            raise ShapeError(f"{name}: shape {value.shape} != declared {self.arrays[name].shape}")
        if not np.all(np.isfinite(value)):
            raise InvariantError(f"{name}: non-finite values")
        if name in self.arrays:
            # in place, so layers built from this store see the update
            self.arrays[name][...] = value
        else:
            self.arrays[name] = value

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def __len__(self) -> int:
        return len(self.arrays)

    def items(self):
        return self.arrays.items()

    def declare(self, name: str, shape, scheme: Optional[str] = None) -> np.ndarray:
        """Return the array called ``name``, creating it if absent.

        Existing arrays (for example loaded from disk) must match ``shape``.
        """
        shape = tuple(int(s) for s in shape)
        if name in self.arrays:
            have = self.arrays[name].shape
            if have != shape:
                raise ShapeError(f"{name}: stored shape {have} != declared {shape}")
            return self.arrays[name]
        if self.strict:
            raise ConfigError(f"parameter {name!r} missing from loaded store")
        arr = seeded_init(shape, _name_seed(self.seed, name), scheme or self.init_scheme)
        self.arrays[name] = arr
        return arr

    def linear(self, prefix: str, c_in: int, c_out: int, activation: str = "none") -> LinearLayer:
        w = self.declare(f"{prefix}.w", (c_in, c_out))
        b = self.declare(f"{prefix}.b", (c_out,), "zeros")
        return LinearLayer(w, b, activation)

    def norm(self, prefix: str, channels: int) -> AffineNorm:
        scale = self.declare(f"{prefix}.scale", (channels,), "ones")
        shift = self.declare(f"{prefix}.shift", (channels,), "zeros")
        return AffineNorm(scale, shift)

    def copy(self) -> "ParamStore":
        other = ParamStore(self.seed, self.init_scheme)
        other.arrays = {k: v.copy() for k, v in self.arrays.items()}
        return other

    def n_params(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def to_bytes(self) -> bytes:
        out = [PARAM_MAGIC, struct.pack("<II", PARAM_VERSION, len(self.arrays))]
        for name, arr in self.arrays.items():
            raw = name.encode("utf-8")
            out.append(struct.pack("<I", len(raw)))
            out.append(raw)
            out.append(struct.pack("<I", arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParamStore":
        if data[:4] != PARAM_MAGIC:
            raise ConfigError("not a parameter file (bad magic)")
        version, count = struct.unpack_from("<II", data, 4)
        if version != PARAM_VERSION:
            raise ConfigError(f"unsupported parameter file version {version}")
        store = cls()
        pos = 12
        try:
            for _ in range(count):
                (nlen,) = struct.unpack_from("<I", data, pos)
                pos += 4
                name = data[pos:pos + nlen].decode("utf-8")
                pos += nlen
                (rank,) = struct.unpack_from("<I", data, pos)
                pos += 4
                dims = struct.unpack_from(f"<{rank}Q", data, pos)
                pos += 8 * rank
                size = int(np.prod(dims)) if rank else 1
                arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos)
                pos += 8 * size
                if name in store.arrays:
                    raise ConfigError(f"duplicate parameter name {name!r}")
                store.arrays[name] = arr.astype(np.float64).reshape(dims)
        except (struct.error, ValueError) as exc:
            raise ConfigError(f"truncated parameter file: {exc}") from exc
        if pos != len(data):
            raise ConfigError("trailing bytes after parameter entries")
        store.strict = True
        return store

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        return cls.from_bytes(Path(path).read_bytes())
