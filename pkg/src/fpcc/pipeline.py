"""End-to-end orchestration: synthetic scenes, full transmit/receive runs,
channel sweeps and report emission.

Detection accuracy is out of scope here, so runs report proxy metrics:
mask precision/recall against box ground truth, attribute MSE, compression
rate and geometry frame success.
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DegenerateInputError, GenerationError
from .geometry import (
    ChannelConfig,
    ExternalGeometryCodec,
    LdpcCode,
    awgn,
    bpsk_demodulate_llr,
    bpsk_modulate,
    channel_rng,
    geometry_transmit,
    hard_decision,
    ldpc_build,
    ldpc_decode,
    ldpc_encode,
)
from .jscc import (
    ATTR_CHANNELS,
    DEFAULT_WIDTH,
    evaluate_mse,
    init_jscc,
    jscc_decode,
    jscc_encode,
    mse_loss,
    synthetic_attribute_frames,
    train_phase_two,
    transmit_attributes,
)
from .masks import BoundingBox, SceneSpec, merge_boxes, sparse_labels
from .source_codec import (
    FEATURE_CHANNELS,
    CompactionModel,
    DecompactionModel,
    channel_compact,
    channel_decompact,
    compaction_dims,
    spatial_compact_infer,
    spatial_probs,
)
from .sparse import SparseVoxelTensor
from .tensor_core import ParamStore
from .upsampler import DiffusionConfig, UpsamplerModel, default_stats, load_stats, upsample

CONFIG_VERSION = 1
POWER_TOL = 1e-10

# stage tags for per-frame random streams
STAGE_SCENE = 1
STAGE_GEOMETRY = 2
STAGE_ATTRIBUTE = 3
STAGE_UPSAMPLE = 4


# -- configuration -------------------------------------------------------------

@dataclass
class LdpcSettings:
    m: int = 20
    dv: int = 2
    dc: int = 5
    n: Optional[int] = None
    max_iters: int = 50
    seed: int = 0
    enabled: bool = True


@dataclass
class SceneSettings:
    extent: Tuple[float, float, float] = (70.4, 80.0, 4.0)
    grid: Tuple[int, int, int] = (88, 100, 8)
    n_objects: int = 8
    background_density: float = 0.03
    box_fill: float = 0.6


@dataclass
class WeightPaths:
    compaction: Optional[str] = None
    decompaction: Optional[str] = None
    jscc: Optional[str] = None
    upsampler: Optional[str] = None
    upsampler_stats: Optional[str] = None


_SECTIONS = {"scene": SceneSettings, "ldpc": LdpcSettings, "weights": WeightPaths}


@dataclass
class PipelineConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    model_seed: int = 0
    n_frames: int = 4
    snr_db: List[float] = field(default_factory=lambda: [10.0])
    channels: int = 8
    expansion: int = 16
    jscc_width: int = DEFAULT_WIDTH
    jscc_wiring: str = "serial"
    mask_source: str = "model"
    upsample_mode: str = "anchored"
    diffusion_steps: int = 1
    workers: int = 1
    record_timings: bool = False
    external_geom_codec: Optional[str] = None
    out_dir: str = "out"
    scene: SceneSettings = field(default_factory=SceneSettings)
    ldpc: LdpcSettings = field(default_factory=LdpcSettings)
    weights: WeightPaths = field(default_factory=WeightPaths)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        if self.channels not in (2, 4, 6, 8):
            raise ConfigError("channels must be one of 2, 4, 6, 8")
        if self.expansion < 0:
            raise ConfigError("expansion must be non-negative")
        if self.n_frames < 0 or self.workers < 1:
            raise ConfigError("n_frames must be >= 0 and workers >= 1")
        if not self.snr_db:
            raise ConfigError("at least one SNR is required")
        for s in self.snr_db:
            if math.isnan(s) or s == -math.inf:
                raise ConfigError(f"invalid SNR {s}")
        if self.mask_source not in ("model", "ground_truth"):
            raise ConfigError(f"unknown mask source {self.mask_source!r}")
        if self.upsample_mode not in ("anchored", "free", "off"):
            raise ConfigError(f"unknown upsample mode {self.upsample_mode!r}")
        if self.jscc_width < 1 or self.diffusion_steps < 1:
            raise ConfigError("jscc_width and diffusion_steps must be positive")
        if self.scene.n_objects < 0 or not 0 <= self.scene.background_density <= 1:
            raise ConfigError("bad scene settings")
        self.scene_spec()

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(tuple(self.scene.extent), tuple(self.scene.grid), self.expansion)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        for key, typ in _SECTIONS.items():
            if key in d:
                sub = d[key]
                if not isinstance(sub, dict):
                    raise ConfigError(f"config section {key!r} must be an object")
                bad = set(sub) - {f.name for f in fields(typ)}
                if bad:
                    raise ConfigError(f"unknown keys in {key!r}: {sorted(bad)}")
                d[key] = typ(**sub)
        if "snr_db" in d:
            d["snr_db"] = [float(s) for s in d["snr_db"]]
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be an object")
        return cls.from_dict(raw)


def stage_seed(master: int, frame: int, stage: int) -> int:
    """Integer seed for the (master, frame, stage) stream."""
    ss = np.random.SeedSequence([int(master), int(frame), int(stage)])
    return int(ss.generate_state(1, np.uint64)[0])


# -- synthetic scenes ----------------------------------------------------------

# rough car / pedestrian / cyclist footprints in metres (l, w, h)
_BOX_SIZES = ((3.9, 1.6, 1.5), (0.8, 0.6, 1.7), (1.8, 0.6, 1.7))


def _overlaps_bev(a: BoundingBox, b: BoundingBox) -> bool:
    return abs(a.x - b.x) * 2 < a.l + b.l and abs(a.y - b.y) * 2 < a.w + b.w


def gen_scene(seed: int, n_objects: int, spec: SceneSpec, background_density: float = 0.03,
              box_fill: float = 0.6, retries: int = 200):
    """Random boxes plus a 64-channel feature tensor.

    Voxels inside each box are kept with probability ``box_fill`` (at least one
    per box); other voxels with ``background_density``. Attributes are unit
    Gaussians, shifted by a per-box mean inside boxes.
    """
    if n_objects < 0:
        raise ConfigError("n_objects must be non-negative")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), STAGE_SCENE]))
    L = spec.extent
    boxes: List[BoundingBox] = []
    for _ in range(n_objects):
        for _ in range(retries):
            l, w, h = _BOX_SIZES[rng.integers(len(_BOX_SIZES))] * rng.uniform(0.85, 1.15, 3)
            if l >= L[0] or w >= L[1] or h >= L[2]:
                continue
            cand = BoundingBox(rng.uniform(l / 2, L[0] - l / 2), rng.uniform(w / 2, L[1] - w / 2),
                               rng.uniform(h / 2, L[2] - h / 2), l, w, h)
            # small boxes can fall between voxel sample points
            if any(_overlaps_bev(cand, b) for b in boxes) or not len(merge_boxes([cand], spec, 0)):
                continue
            boxes.append(cand)
            break
        else:
            raise GenerationError(f"could not place object {len(boxes)} after {retries} tries")

    G = spec.grid
    total = int(np.prod(G))
    box_masks = [merge_boxes([b], spec, 0).keys for b in boxes]
    occupied = rng.random(total) < background_density
    offsets = np.zeros((total, FEATURE_CHANNELS))
    for keys in box_masks:
        keep = rng.random(keys.size) < box_fill
        keep[rng.integers(keys.size)] = True
        occupied[keys[keep]] = True
        offsets[keys] = rng.normal(0.0, 1.5, FEATURE_CHANNELS)
    keys = np.flatnonzero(occupied)
    attrs = rng.normal(size=(keys.size, FEATURE_CHANNELS)) + offsets[keys]
    u, rem = np.divmod(keys, G[1] * G[2])
    v, w = np.divmod(rem, G[2])
    return SparseVoxelTensor(np.stack([u, v, w], axis=1), attrs, G), boxes


def compression_rate(n: int, c_in: int, n_prime: int, c_out: int) -> float:
    """(n * c_in) / (n' * c_out), computed from exact integer products."""
    if n_prime == 0:
        raise DegenerateInputError("no voxels retained; compression rate undefined")
    if min(n, c_in, n_prime, c_out) <= 0:
        raise ConfigError("compression rate needs positive dimensions")
    return (int(n) * int(c_in)) / (int(n_prime) * int(c_out))


def aggregate_rate(dims_in: Sequence[int], dims_out: Sequence[int]) -> float:
    out = sum(int(d) for d in dims_out)
    if out == 0:
        raise DegenerateInputError("no retained dimensions in the whole set")
    return sum(int(d) for d in dims_in) / out


# -- models --------------------------------------------------------------------

def _store(path: Optional[str], seed: int) -> ParamStore:
    return ParamStore.load(path) if path else ParamStore(seed)


class PipelineModels:
    """All networks of one run, seeded from ``model_seed`` or loaded from disk."""

    def __init__(self, cfg: PipelineConfig):
        w = cfg.weights
        s = cfg.model_seed
        self.compaction = CompactionModel(_store(w.compaction, s), cfg.channels)
        self.decompaction = DecompactionModel(_store(w.decompaction, s), cfg.channels)
        self.encoder, self.decoder = init_jscc(s, cfg.jscc_width, cfg.jscc_wiring, _store(w.jscc, s))
        self.upsampler = None
        if cfg.upsample_mode != "off":
            self.upsampler = UpsamplerModel(_store(w.upsampler, s))
            if w.upsampler_stats:
                self.stats = load_stats(w.upsampler_stats)
            else:
                self.stats = default_stats(cfg.scene.grid)
        lc = cfg.ldpc
        self.code: Optional[LdpcCode] = ldpc_build(lc.m, lc.dv, lc.dc, lc.seed, lc.n) if lc.enabled else None
        self.codec = ExternalGeometryCodec(cfg.external_geom_codec) if cfg.external_geom_codec else None


# -- per-frame processing ------------------------------------------------------

@dataclass
class FrameReport:
    frame_id: int
    snr_db: float
    n: int
    n_prime: int
    dims_in: int
    dims_out: int
    cr: Optional[float]
    failsafe: bool
    frame_ok: bool
    geom_exact: bool
    geom_ber_pre: Optional[float]
    geom_ber_post: Optional[float]
    ldpc_iters: float
    attr_mse: Optional[float]
    tx_power: Optional[float]
    power_ok: bool
    mask_precision: Optional[float]
    mask_recall: Optional[float]
    n_upsampled: Optional[int]
    timings: Optional[Dict[str, float]] = None


REPORT_COLUMNS = [f.name for f in fields(FrameReport) if f.name != "timings"]


@dataclass
class FrontEnd:
    """Edge-side result of one frame before anything touches the channel."""

    scene: SparseVoxelTensor
    boxes: List[BoundingBox]
    compacted: SparseVoxelTensor
    kept: SparseVoxelTensor
    labels: np.ndarray  # GT relevance of each compacted voxel
    kept_rows: np.ndarray
    failsafe: bool


def frame_front_end(cfg: PipelineConfig, models: PipelineModels, frame_id: int) -> FrontEnd:
    spec = cfg.scene_spec()
    scene, boxes = gen_scene(stage_seed(cfg.seed, frame_id, STAGE_SCENE), cfg.scene.n_objects, spec,
                             cfg.scene.background_density, cfg.scene.box_fill)
    fc = channel_compact(scene, models.compaction)
    labels = sparse_labels(merge_boxes(boxes, spec), fc)
    if cfg.mask_source == "ground_truth":
        probs = labels.astype(np.float64)
    else:
        probs = spatial_probs(fc, models.compaction) if fc.n else np.zeros(0)
    res = spatial_compact_infer(fc, probs)
    rows = np.flatnonzero(np.isin(fc.keys, res.tensor.keys))
    return FrontEnd(scene, boxes, fc, res.tensor, labels, rows, res.failsafe)


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den else None


def pad_channels(attrs: np.ndarray, width: int = ATTR_CHANNELS) -> np.ndarray:
    """Zero-pad compacted attributes to the codec's input width."""
    if attrs.shape[1] > width:
        raise ConfigError(f"{attrs.shape[1]} channels exceed codec width {width}")
    return np.hstack([attrs, np.zeros((attrs.shape[0], width - attrs.shape[1]))])


def send_attributes(attrs: np.ndarray, snr_db: float, models: PipelineModels, seed: int):
    """JSCC path for one frame; returns (received attrs, transmitted power)."""
    x = pad_channels(attrs)
    feats = jscc_encode(x, snr_db, models.encoder)
    rx, power = transmit_attributes(feats, ChannelConfig(snr_db, seed))
    out = jscc_decode(rx, snr_db, models.decoder)
    return out[:, : attrs.shape[1]], power


def process_frame(cfg: PipelineConfig, models: PipelineModels, frame_id: int, snr_db: float) -> FrameReport:
    clock = time.perf_counter
    t0 = clock()
    fe = frame_front_end(cfg, models, frame_id)
    t1 = clock()
    kept = fe.kept
    n, n_prime = fe.scene.n, kept.n
    d_in, d_out = compaction_dims(n, n_prime, cfg.channels)
    cr = compression_rate(n, 3 + FEATURE_CHANNELS, n_prime, 3 + cfg.channels) if n_prime else None

    tp = int(fe.labels[fe.kept_rows].sum())
    precision = _ratio(tp, n_prime)
    recall = _ratio(tp, int(fe.labels.sum()))

    geo = geometry_transmit(kept.coords, kept.grid, models.code,
                            ChannelConfig(snr_db, stage_seed(cfg.seed, frame_id, STAGE_GEOMETRY)),
                            cfg.ldpc.max_iters, codec=models.codec)
    exact = bool(geo.frame_ok and np.array_equal(geo.coords, kept.coords))
    t2 = clock()

    attr_mse = power = None
    power_ok = True
    received = None
    if n_prime:
        received, power = send_attributes(kept.attrs, snr_db, models,
                                          stage_seed(cfg.seed, frame_id, STAGE_ATTRIBUTE))
        attr_mse = mse_loss(kept.attrs, received)
        power_ok = abs(power - 1.0) <= POWER_TOL
    t3 = clock()

    n_up = None
    if geo.frame_ok and received is not None:
        # decoded coordinates come back in canonical order, like the sent rows
        rec = SparseVoxelTensor.build(geo.coords, received, kept.grid)
        f4hat = channel_decompact(rec, models.decompaction)
        if models.upsampler is not None:
            dcfg = DiffusionConfig(cfg.diffusion_steps, stage_seed(cfg.seed, frame_id, STAGE_UPSAMPLE))
            g_stats, a_stats = models.stats
            n_up = upsample(f4hat, models.upsampler, g_stats, a_stats, dcfg, cfg.upsample_mode).n
    t4 = clock()

    timings = None
    if cfg.record_timings:
        timings = {"edge": t1 - t0, "geometry": t2 - t1, "attributes": t3 - t2, "cloud": t4 - t3}
    return FrameReport(
        frame_id=frame_id, snr_db=float(snr_db), n=n, n_prime=n_prime, dims_in=d_in, dims_out=d_out,
        cr=cr, failsafe=fe.failsafe, frame_ok=bool(geo.frame_ok), geom_exact=exact,
        geom_ber_pre=_ratio(geo.channel_bit_errors, geo.channel_bits),
        geom_ber_post=_ratio(geo.info_bit_errors, geo.info_bits),
        ldpc_iters=float(geo.mean_iters), attr_mse=attr_mse, tx_power=power, power_ok=power_ok,
        mask_precision=precision, mask_recall=recall, n_upsampled=n_up, timings=timings,
    )


_WORKER_CACHE: Dict[str, PipelineModels] = {}


def _models_for(cfg_json: str) -> Tuple[PipelineConfig, PipelineModels]:
    cfg = PipelineConfig.from_dict(json.loads(cfg_json))
    if cfg_json not in _WORKER_CACHE:
        _WORKER_CACHE.clear()
        _WORKER_CACHE[cfg_json] = PipelineModels(cfg)
    return cfg, _WORKER_CACHE[cfg_json]


def _worker(job) -> FrameReport:
    cfg_json, frame_id, snr = job
    cfg, models = _models_for(cfg_json)
    return process_frame(cfg, models, frame_id, snr)


def run_e2e(cfg: PipelineConfig, models: Optional[PipelineModels] = None) -> Tuple[List[FrameReport], dict]:
    """Every frame at every configured SNR; reports come back ordered by
    (snr index, frame id) whatever the worker count."""
    jobs = [(s, f) for s in cfg.snr_db for f in range(cfg.n_frames)]
    if cfg.workers == 1:
        models = models or PipelineModels(cfg)
        reports = [process_frame(cfg, models, f, s) for s, f in jobs]
    else:
        cj = json.dumps(cfg.to_dict(), sort_keys=True)
        with ProcessPoolExecutor(cfg.workers) as pool:
            reports = list(pool.map(_worker, [(cj, f, s) for s, f in jobs]))
    return reports, aggregate_reports(cfg, reports)


def _mean(vals) -> Optional[float]:
    vals = [v for v in vals if v is not None]
    return math.fsum(vals) / len(vals) if vals else None


def aggregate_reports(cfg: PipelineConfig, reports: List[FrameReport]) -> dict:
    per_snr = {}
    for s in cfg.snr_db:
        rs = [r for r in reports if r.snr_db == s]
        d_out = sum(r.dims_out for r in rs)
        per_snr[repr(float(s))] = {
            "frames": len(rs),
            "frame_ok_rate": _ratio(sum(r.frame_ok for r in rs), len(rs)),
            "geom_exact_rate": _ratio(sum(r.geom_exact for r in rs), len(rs)),
            "dims_in": sum(r.dims_in for r in rs),
            "dims_out": d_out,
            "cr_aggregate": aggregate_rate([r.dims_in for r in rs], [r.dims_out for r in rs]) if d_out else None,
            "attr_mse_mean": _mean(r.attr_mse for r in rs),
            "mask_precision_mean": _mean(r.mask_precision for r in rs),
            "mask_recall_mean": _mean(r.mask_recall for r in rs),
            "ldpc_iters_mean": _mean(r.ldpc_iters for r in rs),
            "power_ok_all": all(r.power_ok for r in rs),
            "failsafe_frames": sum(r.failsafe for r in rs),
        }
    return {
        "version": CONFIG_VERSION,
        # run-placement fields do not change results, so they stay out
        "config": {k: v for k, v in cfg.to_dict().items() if k not in ("workers", "out_dir")},
        "proxy_metrics": ["mask_precision", "mask_recall", "attr_mse", "cr", "frame_ok_rate"],
        "per_snr": per_snr,
    }


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def reports_csv(reports: List[FrameReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = list(REPORT_COLUMNS)
    with_t = any(r.timings for r in reports)
    if with_t:
        cols += ["t_edge", "t_geometry", "t_attributes", "t_cloud"]
    w.writerow(cols)
    for r in reports:
        d = asdict(r)
        row = [_cell(d[c]) for c in REPORT_COLUMNS]
        if with_t:
            t = r.timings or {}
            row += [_cell(t.get(k)) for k in ("edge", "geometry", "attributes", "cloud")]
        w.writerow(row)
    return buf.getvalue()


def write_reports(reports: List[FrameReport], aggregate: dict, out_dir) -> Tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p_csv, p_json = out / "frames.csv", out / "aggregate.json"
    p_csv.write_text(reports_csv(reports))
    p_json.write_text(json.dumps(aggregate, indent=1, sort_keys=True) + "\n")
    return p_csv, p_json


def write_rows_csv(rows: List[dict], path=None) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.writer(buf, lineterminator="\n")
        cols = list(rows[0])
        w.writerow(cols)
        for r in rows:
            w.writerow([_cell(r[c]) for c in cols])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


# -- channel experiments ---------------------------------------------------------

def uncoded_ber(snr_db: float, n_bits: int, seed: int = 0) -> float:
    """Monte Carlo BER of BPSK over AWGN with hard decisions."""
    rng = channel_rng(seed, 0xB17)
    bits = rng.integers(0, 2, n_bits, dtype=np.uint8)
    rx = awgn(bpsk_modulate(bits), ChannelConfig(snr_db, seed), (0xB17, 1))
    return float(np.count_nonzero(hard_decision(rx) != bits)) / n_bits


def coded_trial(code: LdpcCode, snr_db: float, blocks: int, seed: int = 0, max_iters: int = 50) -> dict:
    """Random messages through encode -> BPSK -> AWGN -> sum-product."""
    rng = channel_rng(seed, 0xC0DE)
    msg = rng.integers(0, 2, (blocks, code.k), dtype=np.uint8)
    tx = bpsk_modulate(ldpc_encode(code, msg))
    rx = awgn(tx, ChannelConfig(snr_db, seed), (0xC0DE, 1))
    got, ok, iters = ldpc_decode(code, bpsk_demodulate_llr(rx, snr_db), max_iters)
    errs = got != msg
    return {
        "bit_errors": int(errs.sum()),
        "bits": int(msg.size),
        "block_errors": int(errs.any(axis=1).sum()),
        "blocks": blocks,
        "mean_iters": float(iters.mean()),
        "converged": int(ok.sum()),
    }


def ber_sweep(snrs: Sequence[float], trials: int, code: LdpcCode, seed: int = 0,
              max_iters: int = 50) -> List[dict]:
    """Per SNR: uncoded and coded BER over ``trials`` blocks of ``code.k`` info bits."""
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    rows = []
    for s in snrs:
        c = coded_trial(code, s, trials, seed, max_iters)
        rows.append({
            "snr_db": float(s),
            "uncoded_ber": uncoded_ber(s, trials * code.k, seed),
            "coded_ber": c["bit_errors"] / c["bits"],
            "fer": c["block_errors"] / c["blocks"],
            "mean_iters": c["mean_iters"],
        })
    return rows


def geometry_ablation(cfg: PipelineConfig, snr_db: float, n_frames: Optional[int] = None,
                      models: Optional[PipelineModels] = None) -> dict:
    """Paired geometry runs with LDPC on and off over the same frames.

    A frame fails when the receiver rejects it or its decoded coordinates
    differ from what was sent.
    """
    n_frames = cfg.n_frames if n_frames is None else n_frames
    models = models or PipelineModels(cfg)
    code = models.code or ldpc_build(cfg.ldpc.m, cfg.ldpc.dv, cfg.ldpc.dc, cfg.ldpc.seed, cfg.ldpc.n)
    fails = {"on": 0, "off": 0}
    ok_flags = {"on": 0, "off": 0}
    bits = 0
    for f in range(n_frames):
        kept = frame_front_end(cfg, models, f).kept
        chan = ChannelConfig(snr_db, stage_seed(cfg.seed, f, STAGE_GEOMETRY))
        for tag, c in (("on", code), ("off", None)):
            g = geometry_transmit(kept.coords, kept.grid, c, chan, cfg.ldpc.max_iters, codec=models.codec)
            good = g.frame_ok and np.array_equal(g.coords, kept.coords)
            fails[tag] += not good
            ok_flags[tag] += g.frame_ok
            if tag == "off":
                bits += g.info_bits
    return {
        "snr_db": float(snr_db),
        "frames": n_frames,
        "failure_rate_ldpc_on": fails["on"] / n_frames,
        "failure_rate_ldpc_off": fails["off"] / n_frames,
        "frame_ok_rate_ldpc_on": ok_flags["on"] / n_frames,
        "frame_ok_rate_ldpc_off": ok_flags["off"] / n_frames,
        "mean_payload_bits": bits / n_frames,
    }


# -- parameter sweeps -------------------------------------------------------------

def sweep_expansion(cfg: PipelineConfig, expansions: Sequence[int],
                    models: Optional[PipelineModels] = None) -> List[dict]:
    """Ground-truth mask size and model-mask agreement per expansion size."""
    models = models or PipelineModels(cfg)
    spec = cfg.scene_spec()
    fronts = [frame_front_end(cfg, models, f) for f in range(cfg.n_frames)]
    rows = []
    for e in expansions:
        tp = kept = pos = active = in_mask = 0
        d_in = d_out = 0
        for fe in fronts:
            lab = sparse_labels(merge_boxes(fe.boxes, spec, e), fe.compacted)
            tp += int(lab[fe.kept_rows].sum())
            kept += fe.kept.n
            pos += int(lab.sum())
            active += fe.compacted.n
            # compaction that keeps exactly the ground-truth voxels
            n_gt = int(lab.sum())
            a, b = compaction_dims(fe.scene.n, n_gt, cfg.channels)
            d_in += a
            d_out += b
            in_mask += n_gt
        rows.append({
            "expansion": int(e),
            "gt_fraction": _ratio(in_mask, active),
            "mask_precision": _ratio(tp, kept),
            "mask_recall": _ratio(tp, pos),
            "cr_gt": d_in / d_out if d_out else None,
        })
    return rows


def sweep_channels(cfg: PipelineConfig, channel_list: Sequence[int], snr_db: Optional[float] = None) -> List[dict]:
    """CR and attribute MSE per compacted channel count.

    Voxels are retained by the ground-truth mask so that only ``C_a`` varies
    between rows.
    """
    snr = cfg.snr_db[0] if snr_db is None else snr_db
    rows = []
    for c in channel_list:
        sub = PipelineConfig.from_dict({**cfg.to_dict(), "channels": int(c),
                                        "mask_source": "ground_truth", "upsample_mode": "off"})
        models = PipelineModels(sub)
        d_in = d_out = 0
        mses = []
        for f in range(sub.n_frames):
            fe = frame_front_end(sub, models, f)
            a, b = compaction_dims(fe.scene.n, fe.kept.n, c)
            d_in += a
            d_out += b
            if fe.kept.n:
                rx, _ = send_attributes(fe.kept.attrs, snr, models, stage_seed(sub.seed, f, STAGE_ATTRIBUTE))
                mses.append(mse_loss(fe.kept.attrs, rx))
        rows.append({"channels": int(c), "dims_in": d_in, "dims_out": d_out,
                     "cr": d_in / d_out if d_out else None, "attr_mse": _mean(mses)})
    return rows


def sweep_width(widths: Sequence[int], snrs: Sequence[float] = (0.0,), n_frames: int = 100,
                epochs: int = 5, seed: int = 0, eval_frames: int = 50, lr: float = 1e-3) -> List[dict]:
    """Train one attribute codec per expansion width and report held-out MSE."""
    train = synthetic_attribute_frames(n_frames, seed=seed)
    held = synthetic_attribute_frames(eval_frames, seed=seed + 1)
    rows = []
    for w in widths:
        res = train_phase_two(train, epochs=epochs, lr=lr, seed=seed, width=int(w))
        row = {"width": int(w), "params": res.encoder.store.n_params()}
        for s in snrs:
            row[f"mse@{float(s):g}dB"] = evaluate_mse(res.encoder, res.decoder, held, s, seed + 2)
        rows.append(row)
    return rows
