"""Compiled vs numpy-fallback timings for the hot kernels.

Each backend runs in a fresh interpreter because the choice is made at import
time (``FPCC_PURE_PYTHON=1`` forces the fallback).

    python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

CASES = ("ldpc_2000_blocks_1dB", "ldpc_200_single_1dB", "key_lookup_1M", "submanifold_conv_3x3x3")


def run_cases(repeat):
    import numpy as np

    from fpcc import _backend
    from fpcc.geometry import ChannelConfig, awgn, bpsk_demodulate_llr, bpsk_modulate, ldpc_build, \
        ldpc_decode, ldpc_encode
    from fpcc.pipeline import gen_scene
    from fpcc.masks import SceneSpec
    from fpcc.sparse import SparseKernel, submanifold_conv

    rng = np.random.default_rng(0)
    code = ldpc_build()
    msg = rng.integers(0, 2, (2000, code.k), dtype=np.uint8)
    rx = awgn(bpsk_modulate(ldpc_encode(code, msg)), ChannelConfig(1.0, 0))
    llr = bpsk_demodulate_llr(rx, 1.0)

    keys = np.sort(rng.choice(10 ** 8, 200_000, replace=False))
    query = rng.integers(0, 10 ** 8, 1_000_000)

    scene, _ = gen_scene(0, 8, SceneSpec((70.4, 80.0, 4.0), (88, 100, 8), 16))
    kernel = SparseKernel(rng.normal(size=(27, 64, 16)) / 40, 3)

    jobs = {
        "ldpc_2000_blocks_1dB": lambda: ldpc_decode(code, llr),
        # one block per call, where per-call numpy overhead dominates
        "ldpc_200_single_1dB": lambda: [ldpc_decode(code, row) for row in llr[:200]],
        "key_lookup_1M": lambda: _backend.lookup_keys(keys, query),
        "submanifold_conv_3x3x3": lambda: submanifold_conv(scene, kernel),
    }
    out = {"backend": _backend.BACKEND}
    for name in CASES:
        out[name] = min(timeit.repeat(jobs[name], number=1, repeat=repeat))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.child:
        print(json.dumps(run_cases(args.repeat)))
        return

    results = []
    for pure in ("0", "1"):
        env = dict(os.environ, FPCC_PURE_PYTHON=pure)
        proc = subprocess.run([sys.executable, __file__, "--child", "--repeat", str(args.repeat)],
                              env=env, capture_output=True, text=True, check=True)
        results.append(json.loads(proc.stdout))
    fast, slow = results
    if fast["backend"] != "compiled":
        print("compiled extension not built; both runs use the fallback")
    print(f"{'kernel':<24}{fast['backend']:>12}{slow['backend']:>12}{'speedup':>10}")
    for name in CASES:
        print(f"{name:<24}{fast[name] * 1e3:>10.1f}ms{slow[name] * 1e3:>10.1f}ms"
              f"{slow[name] / fast[name]:>9.1f}x")


if __name__ == "__main__":
    main()
