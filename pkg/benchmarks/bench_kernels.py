"""Time the numba kernels against the numpy fallback at desk-scale shapes.

    python3 benchmarks/bench_kernels.py            # per-kernel table
    python3 benchmarks/bench_kernels.py --model    # also full ViT train steps per backend

The first numba call compiles (or loads the on-disk cache); it is excluded
from the timings. Outputs are compared so a fast but wrong kernel shows up.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from emoe.kernels import _numba, _numpy

# 64 images x 65 tokens, D = 64, r = 16, K = 8
ROWS, DIM, RANK, K = 64 * 65, 64, 16, 8


def cases(rng):
    x = rng.normal(size=(ROWS, DIM))
    g = rng.normal(size=(ROWS, DIM))
    gain, bias = rng.normal(size=(1, DIM)), rng.normal(size=(1, DIM))
    z = rng.normal(size=(ROWS, RANK))
    gz = rng.normal(size=(ROWS, RANK))
    s = rng.normal(size=(ROWS, K))
    gs = rng.normal(size=(ROWS, K))
    idx = rng.integers(0, K, size=ROWS)
    labels = rng.integers(0, 10, size=ROWS)

    def ln(m):
        return m.layernorm(x, gain, bias, 1e-5)

    def ln_back(m):
        y, xhat, rstd = m.layernorm(x, gain, bias, 1e-5)
        return m.layernorm_backward(g, xhat, rstd, gain)

    def en_back(m):
        e, denom = m.energy(z, 1e-6)
        return m.energy_backward(z, e, denom, gz)

    def sm_back(m):
        p = m.softmax_rows(s, 1.0)
        return m.softmax_rows_backward(p, gs, 1.0)

    return {
        "gelu": lambda m: m.gelu(x),
        "gelu_backward": lambda m: m.gelu_backward(x, g),
        "layernorm": ln,
        "layernorm fwd+bwd": ln_back,
        "energy": lambda m: m.energy(z, 1e-6),
        "energy fwd+bwd": en_back,
        "softmax_rows": lambda m: m.softmax_rows(s, 1.0),
        "softmax fwd+bwd": sm_back,
        "top1": lambda m: m.top1(_numpy.softmax_rows(s, 1.0)),
        "count_routes": lambda m: m.count_routes(idx, labels, K, 10),
    }


def _flat(out):
    if isinstance(out, tuple):
        return np.concatenate([np.asarray(o, dtype=np.float64).ravel() for o in out])
    return np.asarray(out, dtype=np.float64).ravel()


def bench(repeat=7, number=20):
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}{'max |diff|':>12}")
    for name, fn in cases(rng).items():
        diff = np.abs(_flat(fn(_numpy)) - _flat(fn(_numba))).max()  # also warms the jit
        t_np = min(timeit.repeat(lambda: fn(_numpy), repeat=repeat, number=number)) / number * 1e3
        t_nb = min(timeit.repeat(lambda: fn(_numba), repeat=repeat, number=number)) / number * 1e3
        print(f"{name:<20}{t_np:>10.3f}{t_nb:>10.3f}{t_np / t_nb:>8.2f}x{diff:>12.2e}")


_STEP_SCRIPT = """
import time, numpy as np
from emoe import kernels
from emoe.train import TrainConfig, make_optimizer, train_step
from emoe.vit import ViT, ViTConfig
model = ViT(ViTConfig(), rng=np.random.default_rng(0))
cfg = TrainConfig(steps={steps})
opt = make_optimizer(model.params, cfg)
rng = np.random.default_rng(1)
x, y = rng.normal(size=(64, 32, 32, 3)), rng.integers(0, 10, size=64)
train_step(model, (x, y), cfg, opt, 1)
t = time.perf_counter()
for s in range({steps}):
    train_step(model, (x, y), cfg, opt, s + 2)
print(kernels.BACKEND, (time.perf_counter() - t) / {steps})
"""


def bench_model(steps=5):
    print(f"\nViT train step (B=64, 32x32, D=64, depth 4), mean of {steps}:")
    for flag in ("0", "1"):
        env = dict(os.environ, EMOE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", _STEP_SCRIPT.format(steps=steps)], env=env,
                             capture_output=True, text=True, check=True).stdout.split()
        print(f"  {out[0]:<6} {float(out[1]) * 1e3:8.1f} ms/step")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--model", action="store_true", help="also time full training steps per backend")
    ap.add_argument("--steps", type=int, default=5)
    args = ap.parse_args()
    bench()
    if args.model:
        bench_model(args.steps)
