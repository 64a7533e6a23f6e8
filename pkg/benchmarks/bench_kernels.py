"""Benchmark the compiled kernels against the pure-numpy reference.

Runs each kernel on training-realistic shapes, checks the two backends
agree, and prints a timing table. Usage:

    python benchmarks/bench_kernels.py [--repeat 50] [--dtype f64|f32]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

import vlpt.kernels as K
from vlpt.kernels import reference as ref


def timeit(fn, repeat):
    fn()  # warm
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(repeat: int, dtype) -> None:
    if not K.HAVE_COMPILED:
        print("compiled kernels not built; nothing to compare")
        return
    gen = np.random.default_rng(0)
    rows, width, hidden = 88 * 4 * 39, 39, 64  # one smoke-scale attention batch
    x = gen.normal(size=(rows, width)).astype(dtype)
    mask = gen.random((rows, width)) > 0.3
    dy = gen.normal(size=(rows, width)).astype(dtype)
    h = gen.normal(size=(3432, hidden)).astype(dtype)
    g = np.ones(hidden, dtype=dtype)
    b = np.zeros(hidden, dtype=dtype)
    dh = gen.normal(size=(3432, hidden)).astype(dtype)
    ffn = gen.normal(size=(3432, 256)).astype(dtype)
    p = gen.normal(size=200_000).astype(dtype)
    pg = gen.normal(size=200_000).astype(dtype)
    m = np.zeros_like(p)
    v = np.zeros_like(p)

    y = ref.softmax_rows(x, mask).astype(dtype)
    _, mu, rstd = ref.layernorm_rows(h, g, b, 1e-5)

    cases = {
        "softmax_rows": (lambda k: k.softmax_rows(x, mask), None),
        "softmax_backward": (lambda k: k.softmax_rows_backward(y, dy), None),
        "layernorm_rows": (lambda k: k.layernorm_rows(h, g, b, 1e-5), None),
        "layernorm_backward": (lambda k: k.layernorm_rows_backward(dh, h, g, mu, rstd), None),
        "gelu": (lambda k: k.gelu(ffn), None),
        "gelu_backward": (lambda k: k.gelu_backward(ffn, ffn), None),
        "adam_update": (
            lambda k: k.adam_update(p.copy(), pg, m.copy(), v.copy(), 1e-3, 0.9, 0.999, 1e-6, 0.01, 5),
            None,
        ),
    }

    print(f"dtype={np.dtype(dtype).name}  (best of {repeat})")
    print(f"{'kernel':>20} {'python':>10} {'compiled':>10} {'speedup':>8}  agreement")
    for name, (call, _) in cases.items():
        t_py = timeit(lambda: call(ref), repeat)
        t_c = timeit(lambda: call(K._fast), repeat)
        a = call(ref)
        c = call(K._fast)
        if isinstance(a, tuple):
            diff = max(np.abs(np.asarray(x1) - np.asarray(x2)).max() for x1, x2 in zip(a, c))
        elif a is None:
            diff = 0.0
        else:
            diff = np.abs(a - c).max()
        print(f"{name:>20} {t_py*1e3:9.3f}ms {t_c*1e3:9.3f}ms {t_py/t_c:7.2f}x  max|d|={diff:.2e}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--dtype", choices=("f64", "f32"), default="f64")
    args = ap.parse_args()
    bench(args.repeat, np.float64 if args.dtype == "f64" else np.float32)
