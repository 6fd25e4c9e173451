"""Time the encoder kernels on both backends and one training stage end to end.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from dualteacher import kernels
from dualteacher.model import EncoderParams

SHAPES = [(64, 16, 64, 8), (256, 16, 64, 8), (2000, 16, 64, 8)]

_STAGE = """
import time
from dualteacher import kernels
from dualteacher.config import standard_config
from dualteacher.protocol import build_world, run_sequence
cfg = standard_config()
world = build_world(cfg, 0)
t0 = time.perf_counter()
run_sequence(cfg, cfg.domain_ids, seed=0, world=world)
print(kernels.BACKEND, time.perf_counter() - t0)
"""


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    print(f"{'B,D,H,F':>18} {'backend':>9} {'forward ms':>11} {'backward ms':>12}")
    for B, D, H, F in SHAPES:
        p = EncoderParams.initialize(D, H, F, rng)
        X = rng.standard_normal((B, D))
        G = rng.standard_normal((B, F))
        for name in kernels.available():
            k = kernels.get(name)
            hid, _, nrm, feat = k.encode_batch(p.W1, p.b1, p.W2, p.b2, X)
            fwd = min(timeit.repeat(lambda: k.encode_batch(p.W1, p.b1, p.W2, p.b2, X), number=5, repeat=repeat)) / 5
            bwd = min(timeit.repeat(lambda: k.backward_batch(p.W1, p.W2, X, hid, feat, nrm, G),
                                    number=5, repeat=repeat)) / 5
            print(f"{f'{B},{D},{H},{F}':>18} {name:>9} {1e3 * fwd:11.3f} {1e3 * bwd:12.3f}")


def bench_sequence():
    """One full standard sequence per backend, each in a fresh interpreter."""
    print("\nfull sequence (seed 0, S1, method ours)")
    for pure in ("1", "0"):
        env = dict(os.environ, DUALTEACHER_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, "-c", _STAGE], env=env, capture_output=True, text=True, check=True)
        backend, secs = out.stdout.split()
        print(f"{backend:>9} {float(secs):8.2f} s")
        if pure == "0" and backend == "python":
            break


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    bench_kernels(args.repeat)
    bench_sequence()
