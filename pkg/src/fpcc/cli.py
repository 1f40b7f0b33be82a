"""Command line entry point (``fpcc``)."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .errors import FpccError
from .geometry import (
    ChannelConfig,
    channel_pass,
    geometry_decode_frame,
    geometry_encode_frame,
    ldpc_build,
    read_frame,
    write_frame,
)
from .jscc import (
    ComplexSignal,
    complex_awgn,
    complex_map,
    complex_unmap,
    jscc_decode,
    jscc_encode,
    power_denormalize,
    power_normalize,
    synthetic_attribute_frames,
    train_phase_two,
    write_training_log,
)
from .masks import brute_force_mask, merge_boxes, read_boxes, write_boxes, write_mask
from .source_codec import channel_compact, channel_decompact, spatial_compact_infer, spatial_probs
from .sparse import SparseVoxelTensor, read_tensor_text, write_tensor_text
from .upsampler import DiffusionConfig, upsample

log = logging.getLogger("fpcc")


def _snr(text: str) -> float:
    v = float(text)
    if math.isnan(v):
        raise argparse.ArgumentTypeError("SNR must be a number or inf")
    return v


def _int_list(text: str):
    return [int(v) for v in text.split(",") if v.strip()]


def _float_list(text: str):
    return [_snr(v) for v in text.split(",") if v.strip()]


def load_config(args) -> pl.PipelineConfig:
    cfg = pl.PipelineConfig.load(args.config) if args.config else pl.PipelineConfig()
    d = cfg.to_dict()
    if args.seed is not None:
        d["seed"] = args.seed
    if getattr(args, "snr_db", None) is not None:
        d["snr_db"] = list(args.snr_db)
    if args.out is not None:
        d["out_dir"] = args.out
    if getattr(args, "no_ldpc", False):
        d["ldpc"]["enabled"] = False
    if getattr(args, "external_geom_codec", None):
        d["external_geom_codec"] = args.external_geom_codec
    if getattr(args, "frames", None) is not None:
        d["n_frames"] = args.frames
    if getattr(args, "workers", None) is not None:
        d["workers"] = args.workers
    return pl.PipelineConfig.from_dict(d)


def _out(cfg) -> Path:
    p = Path(cfg.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


# -- subcommands -----------------------------------------------------------------

def cmd_gen_scene(args):
    cfg = load_config(args)
    out = _out(cfg)
    spec = cfg.scene_spec()
    scene, boxes = pl.gen_scene(pl.stage_seed(cfg.seed, args.frame, pl.STAGE_SCENE), cfg.scene.n_objects,
                                spec, cfg.scene.background_density, cfg.scene.box_fill)
    write_tensor_text(scene, out / "scene.txt")
    write_boxes(boxes, out / "boxes.txt")
    write_mask(merge_boxes(boxes, spec), out / "mask.txt")
    print(f"{scene.n} voxels, {len(boxes)} boxes -> {out}")


def cmd_e2e(args):
    cfg = load_config(args)
    if args.timings:
        cfg.record_timings = True
    reports, agg = pl.run_e2e(cfg)
    p_csv, p_json = pl.write_reports(reports, agg, _out(cfg))
    for snr, a in agg["per_snr"].items():
        print(f"snr {snr} dB: frame_ok {a['frame_ok_rate']}, CR {a['cr_aggregate']}, "
              f"attr MSE {a['attr_mse_mean']}")
    print(f"wrote {p_csv} and {p_json}")


def cmd_ber_sweep(args):
    cfg = load_config(args)
    lc = cfg.ldpc
    code = ldpc_build(lc.m, lc.dv, lc.dc, lc.seed, lc.n)
    rows = pl.ber_sweep(cfg.snr_db, args.trials, code, cfg.seed, lc.max_iters)
    path = _out(cfg) / "ber_sweep.csv"
    print(pl.write_rows_csv(rows, path), end="")


def cmd_sweep_expansion(args):
    cfg = load_config(args)
    rows = pl.sweep_expansion(cfg, args.values)
    print(pl.write_rows_csv(rows, _out(cfg) / "sweep_expansion.csv"), end="")


def cmd_sweep_channels(args):
    cfg = load_config(args)
    rows = pl.sweep_channels(cfg, args.values)
    print(pl.write_rows_csv(rows, _out(cfg) / "sweep_channels.csv"), end="")


def cmd_sweep_width(args):
    cfg = load_config(args)
    rows = pl.sweep_width(args.values, cfg.snr_db, args.train_frames, args.epochs, cfg.seed)
    print(pl.write_rows_csv(rows, _out(cfg) / "sweep_width.csv"), end="")


def cmd_train_jscc(args):
    cfg = load_config(args)
    out = _out(cfg)
    train = synthetic_attribute_frames(args.train_frames, seed=cfg.seed)
    held = synthetic_attribute_frames(args.eval_frames, seed=cfg.seed + 1)
    res = train_phase_two(train, epochs=args.epochs, lr=args.lr, weight_decay=args.weight_decay,
                          seed=cfg.model_seed, width=cfg.jscc_width, wiring=cfg.jscc_wiring,
                          eval_frames=held, eval_snrs=cfg.snr_db,
                          log=lambda row: log.info("%s", row))
    res.encoder.store.save(out / "jscc.fpcw")
    write_training_log(res.eval_rows, out / "train_log.csv")
    print(f"final loss {res.losses[-1]!r}; weights in {out / 'jscc.fpcw'}")


def cmd_mask_oracle(args):
    cfg = load_config(args)
    spec = cfg.scene_spec()
    if args.boxes:
        boxes = read_boxes(args.boxes)
    else:
        _, boxes = pl.gen_scene(pl.stage_seed(cfg.seed, args.frame, pl.STAGE_SCENE), cfg.scene.n_objects,
                                spec, cfg.scene.background_density, cfg.scene.box_fill)
    fast = merge_boxes(boxes, spec)
    ref = brute_force_mask(boxes, spec)
    write_mask(fast, _out(cfg) / "mask.txt")
    same = fast == ref
    print(f"{len(fast)} mask voxels; brute-force scan {'agrees' if same else 'DISAGREES'}")
    return 0 if same else 1


def _signal_files(out: Path, sig: ComplexSignal, meta: dict):
    np.save(out / "attributes.npy", np.stack([sig.re, sig.im]))
    meta = dict(meta, scale=sig.scale, pad=sig.pad, shape=list(sig.shape))
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def cmd_encode(args):
    cfg = load_config(args)
    out = _out(cfg)
    scene = read_tensor_text(args.input)
    models = pl.PipelineModels(cfg)
    fc = channel_compact(scene, models.compaction)
    kept = spatial_compact_infer(fc, spatial_probs(fc, models.compaction)).tensor
    snr = cfg.snr_db[0]
    frame = geometry_encode_frame(kept.coords, kept.grid, models.code,
                                  bitstream=models.codec.encode(kept.coords, kept.grid) if models.codec else None)
    (out / "geometry.frame").write_bytes(write_frame(frame))
    feats = jscc_encode(pl.pad_channels(kept.attrs), snr, models.encoder)
    sig = power_normalize(complex_map(feats))
    _signal_files(out, sig, {"snr_db": snr, "n": scene.n, "n_prime": kept.n, "channels": cfg.channels,
                             "grid": list(kept.grid)})
    print(f"kept {kept.n} of {scene.n} voxels; CR {pl.compression_rate(scene.n, 67, kept.n, 3 + cfg.channels)!r}")


def cmd_decode(args):
    cfg = load_config(args)
    src = Path(args.input)
    out = _out(cfg)
    models = pl.PipelineModels(cfg)
    meta = json.loads((src / "meta.json").read_text())
    snr = cfg.snr_db[0]
    chan = ChannelConfig(snr, pl.stage_seed(cfg.seed, 0, pl.STAGE_GEOMETRY))
    frame = channel_pass(read_frame((src / "geometry.frame").read_bytes()), chan)
    geo = geometry_decode_frame(frame, models.code, snr, cfg.ldpc.max_iters,
                                decoder=models.codec.decode if models.codec else None)
    if not geo.frame_ok:
        print("geometry frame failed to decode", file=sys.stderr)
        return 2
    reim = np.load(src / "attributes.npy")
    sig = ComplexSignal(reim[0], reim[1], meta["scale"], meta["pad"], tuple(meta["shape"]))
    rx = complex_awgn(sig, ChannelConfig(snr, pl.stage_seed(cfg.seed, 0, pl.STAGE_ATTRIBUTE)))
    attrs = jscc_decode(complex_unmap(power_denormalize(rx)), meta["snr_db"], models.decoder)
    attrs = attrs[:, : meta["channels"]]
    rec = SparseVoxelTensor.build(geo.coords, attrs, tuple(meta["grid"]))
    f4hat = channel_decompact(rec, models.decompaction)
    write_tensor_text(f4hat, out / "f4hat.txt")
    msg = f"decoded {rec.n} voxels"
    if models.upsampler is not None:
        g, a = models.stats
        f3 = upsample(f4hat, models.upsampler, g, a,
                      DiffusionConfig(cfg.diffusion_steps, pl.stage_seed(cfg.seed, 0, pl.STAGE_UPSAMPLE)),
                      cfg.upsample_mode)
        write_tensor_text(f3, out / "f3hat.txt")
        msg += f", upsampled to {f3.n}"
    print(msg)


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON pipeline config")
    common.add_argument("--seed", type=int, help="master seed override")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    snr = argparse.ArgumentParser(add_help=False)
    snr.add_argument("--snr-db", type=_float_list, help="comma separated SNRs in dB (inf allowed)")

    chan = argparse.ArgumentParser(add_help=False)
    chan.add_argument("--no-ldpc", action="store_true", help="send geometry without LDPC")
    chan.add_argument("--external-geom-codec", metavar="CMD", help="external geometry codec command")

    p = argparse.ArgumentParser(prog="fpcc", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-scene", parents=[common], help="write a synthetic scene, boxes and mask")
    s.add_argument("--frame", type=int, default=0)
    s.set_defaults(func=cmd_gen_scene)

    s = sub.add_parser("e2e", parents=[common, snr, chan], help="full pipeline over all frames")
    s.add_argument("--frames", type=int)
    s.add_argument("--workers", type=int)
    s.add_argument("--timings", action="store_true", help="include wall-clock timings in reports")
    s.set_defaults(func=cmd_e2e)

    s = sub.add_parser("ber-sweep", parents=[common, snr], help="uncoded vs LDPC BER per SNR")
    s.add_argument("--trials", type=int, default=1000, help="LDPC blocks per SNR")
    s.set_defaults(func=cmd_ber_sweep)

    s = sub.add_parser("sweep-expansion", parents=[common], help="mask metrics per expansion size")
    s.add_argument("--values", type=_int_list, default=[0, 8, 16, 24, 32])
    s.add_argument("--frames", type=int)
    s.set_defaults(func=cmd_sweep_expansion)

    s = sub.add_parser("sweep-channels", parents=[common, snr], help="CR and MSE per channel count")
    s.add_argument("--values", type=_int_list, default=[2, 4, 6, 8])
    s.add_argument("--frames", type=int)
    s.set_defaults(func=cmd_sweep_channels)

    s = sub.add_parser("sweep-width", parents=[common, snr], help="trained MSE per JSCC width")
    s.add_argument("--values", type=_int_list, default=[10, 20, 40, 80])
    s.add_argument("--epochs", type=int, default=5)
    s.add_argument("--train-frames", type=int, default=100)
    s.set_defaults(func=cmd_sweep_width)

    s = sub.add_parser("train-jscc", parents=[common, snr], help="train the attribute codec")
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--weight-decay", type=float, default=1e-5)
    s.add_argument("--train-frames", type=int, default=500)
    s.add_argument("--eval-frames", type=int, default=50)
    s.set_defaults(func=cmd_train_jscc)

    s = sub.add_parser("mask-oracle", parents=[common], help="ground-truth mask with brute-force check")
    s.add_argument("--boxes", help="box file (x y z l w h per line); default: generated scene")
    s.add_argument("--frame", type=int, default=0)
    s.set_defaults(func=cmd_mask_oracle)

    s = sub.add_parser("encode", parents=[common, snr, chan], help="edge side: tensor text -> channel symbols")
    s.add_argument("--input", required=True, help="64-channel tensor text file")
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("decode", parents=[common, snr, chan], help="channel + cloud side: symbols -> tensors")
    s.add_argument("--input", required=True, help="directory written by encode")
    s.set_defaults(func=cmd_decode)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        rc = args.func(args)
    except FpccError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())
