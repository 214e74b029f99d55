"""Compare the compiled and numpy kernel backends.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--no-step]

Prints a table of per-call times for each kernel on shapes taken from the
default model, then times one full training step under each backend (the
step runs in a subprocess so MIMAE_PURE_PYTHON takes effect at import).
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from mimae import _kernels

SHAPES = {
    "layer_norm": (64 * 4 * 5, 64),  # batch * masks * (visible + cls), embed_dim
    "softmax": (64 * 4 * 4 * 5, 5),  # attention rows
    "gelu": (64 * 4 * 5, 256),  # MLP hidden
}

STEP_SNIPPET = """
import time, numpy as np
from mimae import _kernels
from mimae.model import ModelConfig
from mimae.trainer import TrainConfig, init_state, train_step
from mimae.io.dataset import SyntheticSpec, gen_synthetic
ds = gen_synthetic(SyntheticSpec(num_images=64))
st = init_state(ModelConfig(), TrainConfig(batch_size=64), 1)
train_step(st, ds.images)
t = time.perf_counter()
for _ in range({n}):
    train_step(st, ds.images)
print(_kernels.BACKEND, (time.perf_counter() - t) / {n})
"""


def kernel_cases(mod, rng):
    x = rng.standard_normal(SHAPES["layer_norm"]).astype(np.float32)
    g = np.ones(x.shape[1], np.float32)
    b = np.zeros(x.shape[1], np.float32)
    y, xhat, rstd = mod.layer_norm_fwd(x, g, b, 1e-6)
    s = rng.standard_normal(SHAPES["softmax"]).astype(np.float32)
    sy = mod.softmax_fwd(s)
    h = rng.standard_normal(SHAPES["gelu"]).astype(np.float32)
    return {
        "layer_norm_fwd": lambda: mod.layer_norm_fwd(x, g, b, 1e-6),
        "layer_norm_bwd": lambda: mod.layer_norm_bwd(y, xhat, rstd, g),
        "softmax_fwd": lambda: mod.softmax_fwd(s),
        "softmax_bwd": lambda: mod.softmax_bwd(sy, s),
        "gelu_fwd": lambda: mod.gelu_fwd(h),
        "gelu_bwd": lambda: mod.gelu_bwd(h, h),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--steps", type=int, default=3)
    ap.add_argument("--no-step", action="store_true")
    args = ap.parse_args(argv)

    backends = _kernels.available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the numpy backend is available")
    timings = {}
    for name in backends:
        cases = kernel_cases(_kernels.get_backend(name), np.random.default_rng(0))
        for kernel, fn in cases.items():
            timings.setdefault(kernel, {})[name] = min(timeit.repeat(fn, number=args.repeat, repeat=3)) / args.repeat

    print(f"{'kernel':<16}" + "".join(f"{b:>14}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for kernel, row in timings.items():
        line = f"{kernel:<16}" + "".join(f"{row[b] * 1e6:>11.1f} us" for b in backends)
        if len(backends) > 1:
            line += f"{row['python'] / row['cython']:>11.2f}x"
        print(line)

    if not args.no_step:
        print("\nfull training step (batch 64, 4 masks):")
        for name in backends:
            env = dict(os.environ, MIMAE_PURE_PYTHON="1" if name == "python" else "0")
            out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(n=args.steps)], env=env,
                                 capture_output=True, text=True, check=True).stdout.split()
            print(f"  {out[0]:<8} {float(out[1]) * 1e3:8.1f} ms/step")


if __name__ == "__main__":
    main()
