"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--batch 32]

Prints one TSV row per kernel and shape: median milliseconds for the
compiled loops and the numpy version, and the speedup. Rows marked ``numpy``
in the last column are shapes the dispatcher sends to numpy anyway. The last
row times one training epoch of a smallnet domain under each backend, each in
a fresh interpreter so the backend is chosen at import.
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from affinemask import kernels

# (N, C, H, W), (F, C, KH, KW), stride, pad
SHAPES = [
    ((32, 1, 16, 16), (8, 1, 3, 3), 1, 1),
    ((32, 8, 8, 8), (16, 8, 3, 3), 1, 1),
    ((32, 16, 16, 16), (32, 16, 3, 3), 1, 1),
    ((32, 8, 16, 16), (16, 8, 3, 3), 2, 1),
]

EPOCH_SCRIPT = """
import time
from affinemask import kernels
from affinemask.data import generate
from affinemask.masks import MaskTransformConfig
from affinemask.net import build_backbone, load_arch
from affinemask.train import Schedule, new_domain_net, train_domain
bb = build_backbone(load_arch("smallnet"), 0)
bb.freeze()
ds = generate("bars", 10, {n}, 64, seed=0)
net = new_domain_net(bb, ds, MaskTransformConfig("full"), 0)
t = time.perf_counter()
train_domain(net, ds, Schedule(1, 1), seed=0)
print(kernels.BACKEND, time.perf_counter() - t)
"""


def median_ms(fn, repeat: int) -> float:
    times = timeit.repeat(fn, number=1, repeat=repeat)
    return 1e3 * float(np.median(times))


def kernel_rows(repeat: int, batch: int):
    rng = np.random.default_rng(0)
    for xs, ws, stride, pad in SHAPES:
        xs = (batch,) + xs[1:]
        x = rng.standard_normal(xs).astype(np.float32)
        w = rng.standard_normal(ws).astype(np.float32)
        out = kernels.conv2d_forward_numpy(x, w, stride, pad)
        g = rng.standard_normal(out.shape).astype(np.float32)
        label = f"{xs}x{ws}/s{stride}"
        pairs = {
            "conv_forward": (lambda: kernels.conv2d_forward_compiled(x, w, stride, pad),
                             lambda: kernels.conv2d_forward_numpy(x, w, stride, pad)),
            "conv_backward": (lambda: kernels.conv2d_backward_compiled(x, w, g, stride, pad),
                              lambda: kernels.conv2d_backward_numpy(x, w, g, stride, pad)),
        }
        used = "cython" if kernels._compiled_conv(x, w, stride) else "numpy"
        for name, (fast, slow) in pairs.items():
            yield name, label, median_ms(fast, repeat), median_ms(slow, repeat), used
    x = rng.standard_normal((batch, 16, 16, 16)).astype(np.float32)
    _, arg = kernels.maxpool2d_forward_numpy(x, 2)
    g = rng.standard_normal((batch, 16, 8, 8)).astype(np.float32)
    yield ("maxpool_forward", str(x.shape), median_ms(lambda: kernels.maxpool2d_forward(x, 2), repeat),
           median_ms(lambda: kernels.maxpool2d_forward_numpy(x, 2), repeat), "cython")
    yield ("maxpool_backward", str(x.shape), median_ms(lambda: kernels.maxpool2d_backward(g, arg, 2, 16, 16), repeat),
           median_ms(lambda: kernels.maxpool2d_backward_numpy(g, arg, 2, 16, 16), repeat), "cython")


def epoch_seconds(pure: bool, n: int) -> tuple[str, float]:
    env = dict(os.environ, AFFINEMASK_PURE="1" if pure else "0")
    res = subprocess.run([sys.executable, "-c", EPOCH_SCRIPT.format(n=n)], env=env,
                         capture_output=True, text=True, check=True)
    backend, secs = res.stdout.split()
    return backend, float(secs)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--epoch-size", type=int, default=640, help="training images for the epoch timing")
    args = ap.parse_args(argv)
    if kernels.BACKEND != "cython":
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first", file=sys.stderr)
        return 1
    print("kernel\tshape\tcython_ms\tnumpy_ms\tspeedup\tdispatch")
    for name, label, fast, slow, used in kernel_rows(args.repeat, args.batch):
        print(f"{name}\t{label}\t{fast:.3f}\t{slow:.3f}\t{slow / fast:.2f}\t{used}")
    fast_backend, fast = epoch_seconds(False, args.epoch_size)
    slow_backend, slow = epoch_seconds(True, args.epoch_size)
    assert (fast_backend, slow_backend) == ("cython", "numpy")
    print(f"train_epoch\t{args.epoch_size} images\t{1e3 * fast:.1f}\t{1e3 * slow:.1f}\t{slow / fast:.2f}\tmixed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
