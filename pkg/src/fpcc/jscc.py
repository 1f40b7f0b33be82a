"""SNR-adaptive analog attribute path.

Encoder: residual expansion block, SNR modulation block, residual refinement
block. The output rows are flattened into complex samples, power-normalized,
sent over complex AWGN, denormalized and unflattened. The decoder mirrors the
encoder. Gradients are analytic end to end, including through the power
normalization, so the pair can be trained with Adam on the attribute MSE.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DegenerateInputError, ShapeError, TrainingError
from .geometry import ChannelConfig, channel_rng, noise_variance
from .tensor_core import LinearLayer, ParamStore, as_matrix, fc_backward, fc_forward

ATTR_CHANNELS = 8
HIDDEN = 20
DEFAULT_WIDTH = 40
SNR_BLOCK = 8
SNR_SCALE_DB = 20.0
# conditioning input for the +inf sentinel; far above any trained range
SNR_INPUT_CAP_DB = 40.0
WIRINGS = ("serial", "literal")


def snr_feature(snr_db: float, rows: int, width: int = SNR_BLOCK) -> np.ndarray:
    v = min(float(snr_db), SNR_INPUT_CAP_DB) / SNR_SCALE_DB
    return np.full((rows, width), v)


class _Tape:
    """Records FC applications so they can be replayed backwards."""

    def __init__(self):
        self.ops: List[Tuple[str, LinearLayer, np.ndarray]] = []

    def fc(self, name: str, layer: LinearLayer, x: np.ndarray) -> np.ndarray:
        self.ops.append((name, layer, x))
        return fc_forward(layer, x)


def _accumulate(grads: Dict[str, np.ndarray], name: str, gw, gb) -> None:
    for key, g in ((f"{name}.w", gw), (f"{name}.b", gb)):
        if key in grads:
            grads[key] += g
        else:
            grads[key] = g.copy()


class _ModBlock:
    def __init__(self, store: ParamStore, prefix: str, width: int, snr_width: int):
        self.prefix = prefix
        self.width = width
        self.fc_l = store.linear(f"{prefix}.fc_l", width + snr_width, width, "leaky_relu")
        self.fc_s = store.linear(f"{prefix}.fc_s", width, width, "sigmoid")
        self.fc = store.linear(f"{prefix}.fc", width, width)
        self.snr_width = snr_width

    def forward(self, b1, snr_db):
        z = np.hstack([b1, snr_feature(snr_db, b1.shape[0], self.snr_width)])
        h = fc_forward(self.fc_l, z)
        gate = fc_forward(self.fc_s, h) + fc_forward(self.fc, h)
        return b1 * gate, (b1, z, h, gate)

    def backward(self, cache, g_out, grads):
        b1, z, h, gate = cache
        g_b1 = g_out * gate
        g_gate = g_out * b1
        gh_s, gw, gb = fc_backward(self.fc_s, h, g_gate)
        _accumulate(grads, f"{self.prefix}.fc_s", gw, gb)
        gh_f, gw, gb = fc_backward(self.fc, h, g_gate)
        _accumulate(grads, f"{self.prefix}.fc", gw, gb)
        gz, gw, gb = fc_backward(self.fc_l, z, gh_s + gh_f)
        _accumulate(grads, f"{self.prefix}.fc_l", gw, gb)
        return g_b1 + gz[:, : self.width]


class _ResBlock:
    """``fc2(fc1(x)) + skip(x)``; ``skip=None`` means identity."""

    def __init__(self, store, prefix, c_in, c_mid, c_out, projected: bool):
        self.prefix = prefix
        self.fc1 = store.linear(f"{prefix}.fc1", c_in, c_mid, "leaky_relu")
        self.fc2 = store.linear(f"{prefix}.fc2", c_mid, c_out, "leaky_relu")
        self.skip = store.linear(f"{prefix}.skip", c_in, c_out) if projected else None
        if not projected and c_in != c_out:
            raise ConfigError(f"{prefix}: identity skip needs c_in == c_out")

    def forward(self, x):
        h = fc_forward(self.fc1, x)
        y = fc_forward(self.fc2, h)
        y = y + (fc_forward(self.skip, x) if self.skip is not None else x)
        return y, (x, h)

    def backward(self, cache, g_out, grads):
        x, h = cache
        gh, gw, gb = fc_backward(self.fc2, h, g_out)
        _accumulate(grads, f"{self.prefix}.fc2", gw, gb)
        gx, gw, gb = fc_backward(self.fc1, x, gh)
        _accumulate(grads, f"{self.prefix}.fc1", gw, gb)
        if self.skip is not None:
            gs, gw, gb = fc_backward(self.skip, x, g_out)
            _accumulate(grads, f"{self.prefix}.skip", gw, gb)
            return gx + gs
        return gx + g_out


class JsccEncoderModel:
    def __init__(self, store: ParamStore, width: int = DEFAULT_WIDTH, wiring: str = "serial",
                 prefix: str = "enc", snr_width: int = SNR_BLOCK):
        if wiring not in WIRINGS:
            raise ConfigError(f"unknown wiring {wiring!r}")
        self.store, self.width, self.wiring = store, width, wiring
        self.res1 = _ResBlock(store, f"{prefix}.res1", ATTR_CHANNELS, HIDDEN, width, True)
        self.mod = _ModBlock(store, f"{prefix}.mod", width, snr_width)
        self.res2 = _ResBlock(store, f"{prefix}.res2", width, width, width, False)

    def forward(self, x, snr_db):
        x = as_matrix(x)
        if x.shape[1] != ATTR_CHANNELS:
            raise ShapeError(f"encoder expects {ATTR_CHANNELS} channels, got {x.shape[1]}")
        b1, c1 = self.res1.forward(x)
        b2, cm = self.mod.forward(b1, snr_db)
        src = b2 if self.wiring == "serial" else b1
        out, c2 = self.res2.forward(src)
        return out, (c1, cm, c2)

    def backward(self, cache, g_out, grads):
        c1, cm, c2 = cache
        g_src = self.res2.backward(c2, g_out, grads)
        if self.wiring == "serial":
            g_b1 = self.mod.backward(cm, g_src, grads)
        else:
            g_b1 = g_src + self.mod.backward(cm, np.zeros_like(g_src), grads)
        return self.res1.backward(c1, g_b1, grads)


class JsccDecoderModel:
    def __init__(self, store: ParamStore, width: int = DEFAULT_WIDTH, prefix: str = "dec",
                 snr_width: int = SNR_BLOCK):
        self.store, self.width = store, width
        self.res1 = _ResBlock(store, f"{prefix}.res1", width, width, width, False)
        self.mod = _ModBlock(store, f"{prefix}.mod", width, snr_width)
        self.res2 = _ResBlock(store, f"{prefix}.res2", width, HIDDEN, ATTR_CHANNELS, True)

    def forward(self, r, snr_db):
        r = as_matrix(r)
        if r.shape[1] != self.width:
            raise ShapeError(f"decoder expects {self.width} channels, got {r.shape[1]}")
        b1, c1 = self.res1.forward(r)
        b2, cm = self.mod.forward(b1, snr_db)
        out, c2 = self.res2.forward(b2)
        return out, (c1, cm, c2)

    def backward(self, cache, g_out, grads):
        c1, cm, c2 = cache
        g = self.res2.backward(c2, g_out, grads)
        g = self.mod.backward(cm, g, grads)
        return self.res1.backward(c1, g, grads)


def init_jscc(seed: int = 0, width: int = DEFAULT_WIDTH, wiring: str = "serial",
              store: Optional[ParamStore] = None):
    """Seeded encoder/decoder pair sharing one parameter store."""
    store = store if store is not None else ParamStore(seed)
    return JsccEncoderModel(store, width, wiring), JsccDecoderModel(store, width)


def jscc_encode(attrs, snr_db: float, model: JsccEncoderModel) -> np.ndarray:
    return model.forward(attrs, snr_db)[0]


def jscc_decode(received, snr_db: float, model: JsccDecoderModel) -> np.ndarray:
    return model.forward(received, snr_db)[0]


# -- complex channel -------------------------------------------------------

@dataclass
class ComplexSignal:
    re: np.ndarray
    im: np.ndarray
    scale: float = 1.0
    pad: int = 0
    shape: Tuple[int, int] = (0, 0)

    def __post_init__(self):
        self.re = np.asarray(self.re, dtype=np.float64)
        self.im = np.asarray(self.im, dtype=np.float64)
        if self.re.shape != self.im.shape:
            raise ShapeError("real and imaginary parts differ in length")
        if not self.scale > 0:
            raise DegenerateInputError("signal scale must be positive")

    @property
    def power(self) -> float:
        return float(np.mean(self.re ** 2 + self.im ** 2))


def complex_map(features, pad_odd: bool = True) -> ComplexSignal:
    """Flatten row-major; first half becomes the real part, second half the imaginary."""
    f = as_matrix(features)
    flat = f.reshape(-1)
    pad = flat.size % 2
    if pad:
        if not pad_odd:
            raise ShapeError("odd number of feature values")
        flat = np.concatenate([flat, [0.0]])
    half = flat.size // 2
    return ComplexSignal(flat[:half].copy(), flat[half:].copy(), 1.0, pad, f.shape)


def complex_unmap(sig: ComplexSignal) -> np.ndarray:
    flat = np.concatenate([sig.re, sig.im])
    if sig.pad:
        flat = flat[: flat.size - sig.pad]
    return flat.reshape(sig.shape)


def power_normalize(sig: ComplexSignal) -> ComplexSignal:
    p = sig.power
    if not p > 0:
        raise DegenerateInputError("cannot power-normalize an all-zero signal")
    s = math.sqrt(p)
    return ComplexSignal(sig.re / s, sig.im / s, sig.scale * s, sig.pad, sig.shape)


def power_denormalize(sig: ComplexSignal) -> ComplexSignal:
    s = sig.scale
    return ComplexSignal(sig.re * s, sig.im * s, 1.0, sig.pad, sig.shape)


def complex_awgn(sig: ComplexSignal, cfg: ChannelConfig, stream: Sequence[int] = ()) -> ComplexSignal:
    s2 = cfg.sigma2
    if s2 == 0.0:
        return ComplexSignal(sig.re.copy(), sig.im.copy(), sig.scale, sig.pad, sig.shape)
    rng = channel_rng(cfg.seed, *stream)
    sd = math.sqrt(s2)
    noise = rng.normal(0.0, sd, size=(2, sig.re.size))
    return ComplexSignal(sig.re + noise[0], sig.im + noise[1], sig.scale, sig.pad, sig.shape)


def draw_channel_noise(shape, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Per-element noise in the flattened (re ++ im) layout of ``complex_map``."""
    rows, cols = shape
    size = rows * cols + (rows * cols) % 2
    s2 = noise_variance(snr_db)
    if s2 == 0.0:
        return np.zeros(size)
    return rng.normal(0.0, math.sqrt(s2), size=size)


class _AnalogChannel:
    """map -> normalize -> + noise -> denormalize -> unmap with exact gradient."""

    @staticmethod
    def forward(x: np.ndarray, noise: np.ndarray):
        sig = power_normalize(complex_map(x))
        flat = np.concatenate([sig.re, sig.im]) + noise
        half = flat.size // 2
        rx = ComplexSignal(flat[:half], flat[half:], sig.scale, sig.pad, sig.shape)
        return complex_unmap(power_denormalize(rx)), (x, noise, sig)

    @staticmethod
    def backward(cache, g_out):
        x, noise, sig = cache
        flat_x = x.reshape(-1)
        g = g_out.reshape(-1)
        eta = noise[: flat_x.size]
        n_complex = (flat_x.size + sig.pad) // 2
        # y = x + s(x) * eta with s = sqrt(sum x^2 / n_complex)
        coeff = float(np.dot(g, eta)) / (n_complex * sig.scale)
        return (g + coeff * flat_x).reshape(x.shape)


def transmit_attributes(feats, cfg: ChannelConfig, stream: Sequence[int] = ()):
    """Send encoder output over the analog channel; returns (received, tx power)."""
    sig = power_normalize(complex_map(feats))
    rx = complex_awgn(sig, cfg, stream)
    return complex_unmap(power_denormalize(rx)), sig.power


def mse_loss(sent, received) -> float:
    a, b = as_matrix(sent, "sent"), as_matrix(received, "received")
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


# -- training --------------------------------------------------------------

def end_to_end(enc: JsccEncoderModel, dec: JsccDecoderModel, x, snr_db: float,
               noise: Optional[np.ndarray] = None, grads: Optional[Dict[str, np.ndarray]] = None):
    """Loss of one batch through encoder, channel and decoder.

    With ``grads`` given, parameter gradients are accumulated into it.
    ``noise`` (flattened re ++ im layout) freezes the channel draw.
    """
    x = as_matrix(x)
    feats, ce = enc.forward(x, snr_db)
    if noise is None:
        noise = np.zeros(feats.size + feats.size % 2)
    rx, cc = _AnalogChannel.forward(feats, noise)
    out, cd = dec.forward(rx, snr_db)
    loss = mse_loss(x, out)
    if grads is not None:
        g = 2.0 * (out - x) / x.size
        g = dec.backward(cd, g, grads)
        g = _AnalogChannel.backward(cc, g)
        enc.backward(ce, g, grads)
    return loss, out


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, store: ParamStore, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-5):
        self.store, self.lr, self.eps, self.wd = store, lr, eps, weight_decay
        self.b1, self.b2 = betas
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in store.items()}
        self.v = {k: np.zeros_like(v) for k, v in store.items()}

    def step(self, grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.store.items():
            g = grads.get(name)
            if g is None:
                continue
            if self.wd:
                g = g + self.wd * p
            self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            p -= self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


@dataclass
class TrainResult:
    encoder: JsccEncoderModel
    decoder: JsccDecoderModel
    losses: List[float]
    eval_rows: List[dict] = field(default_factory=list)


def evaluate_mse(enc, dec, frames, snr_db: float, seed: int = 0) -> float:
    """Mean per-frame attribute MSE through the real channel at one SNR."""
    total = 0.0
    for i, x in enumerate(frames):
        feats = jscc_encode(x, snr_db, enc)
        rx, _ = transmit_attributes(feats, ChannelConfig(snr_db, seed), (i,))
        total += mse_loss(x, jscc_decode(rx, snr_db, dec))
    return total / len(frames)


def train_phase_two(dataset, snr_range=(0.0, 20.0), epochs: int = 20, lr: float = 1e-4,
                    weight_decay: float = 1e-5, seed: int = 0, width: int = DEFAULT_WIDTH,
                    wiring: str = "serial", store: Optional[ParamStore] = None,
                    eval_frames=None, eval_snrs: Sequence[float] = (), log=None) -> TrainResult:
    """Train the attribute codec end to end through the noisy channel.

    One frame is one batch; its SNR is drawn uniformly (in dB) from
    ``snr_range`` and its noise from a generator keyed by (seed, epoch, frame).
    """
    frames = [as_matrix(f) for f in dataset]
    if not frames:
        raise ConfigError("training set is empty")
    enc, dec = init_jscc(seed, width, wiring, store)
    opt = Adam(enc.store, lr=lr, weight_decay=weight_decay)
    order_rng = channel_rng(seed, 0x7A11)
    lo, hi = float(snr_range[0]), float(snr_range[1])
    losses, eval_rows = [], []
    for epoch in range(epochs):
        total = 0.0
        for i in order_rng.permutation(len(frames)):
            rng = channel_rng(seed, epoch, int(i))
            snr = lo if lo == hi else rng.uniform(lo, hi)
            x = frames[i]
            noise = draw_channel_noise((x.shape[0], width), snr, rng)
            grads: Dict[str, np.ndarray] = {}
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, _ = end_to_end(enc, dec, x, snr, noise, grads)
            except DegenerateInputError as exc:
                raise TrainingError(f"training broke down in epoch {epoch}: {exc}", epoch) from exc
            if not math.isfinite(loss):
                raise TrainingError(f"loss became non-finite in epoch {epoch}", epoch)
            opt.step(grads)
            total += loss
        losses.append(total / len(frames))
        row = {"epoch": epoch, "loss": losses[-1]}
        if eval_frames is not None:
            for s in eval_snrs:
                row[f"mse@{s:g}dB"] = evaluate_mse(enc, dec, eval_frames, s, seed + 1)
        eval_rows.append(row)
        if log is not None:
            log(row)
    return TrainResult(enc, dec, losses, eval_rows)


def write_training_log(rows: List[dict], path) -> None:
    if not rows:
        return
    keys = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def synthetic_attribute_frames(n_frames: int, rows: int = 128, seed: int = 0,
                               channels: int = ATTR_CHANNELS) -> List[np.ndarray]:
    """Correlated Gaussian attribute matrices standing in for compacted features."""
    rng = channel_rng(seed, 0x5EED)
    mix = rng.normal(size=(channels, channels)) / math.sqrt(channels)
    out = []
    for _ in range(n_frames):
        offset = rng.normal(0.0, 0.5, size=channels)
        out.append(rng.normal(size=(rows, channels)) @ mix + offset)
    return out
