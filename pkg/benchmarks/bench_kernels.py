"""Benchmark the numba kernels against the pure-numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeats N]

Covers the two hot paths (separable bilinear warp and 3x3 convolution,
forward and backward) at training-representative shapes. The first
numba call is excluded from timing (JIT compilation).
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from canonfscil import kernels as K


def _time(fn, args, repeats):
    fn(*args)  # warmup / JIT
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats


def bench(repeats: int):
    rng = np.random.default_rng(0)
    rows = []

    for B, C, F, T in [(32, 1, 32, 24), (64, 1, 64, 24)]:
        x = rng.standard_normal((B, C, F, T))
        fc = np.clip(rng.uniform(-1, 1, (B, F)), -1, 1)
        tc = np.clip(rng.uniform(-1, 1, (B, T)), -1, 1)
        gy = rng.standard_normal(x.shape)
        rows.append((f"warp fwd {B}x{C}x{F}x{T}",
                     _time(K.warp_forward_np, (x, fc, tc), repeats),
                     _time(K.warp_forward_nb, (x, fc, tc), repeats)))
        rows.append((f"warp bwd {B}x{C}x{F}x{T}",
                     _time(K.warp_backward_np, (x, fc, tc, gy), repeats),
                     _time(K.warp_backward_nb, (x, fc, tc, gy), repeats)))

    for B, Ci, Co, H, W in [(32, 8, 8, 32, 24), (32, 16, 32, 16, 12)]:
        x = rng.standard_normal((B, Ci, H, W))
        w = rng.standard_normal((Co, Ci, 3, 3))
        gy = rng.standard_normal(K.conv2d_forward_np(x, w, 1, 1).shape)
        rows.append((f"conv fwd {B}x{Ci}->{Co} {H}x{W}",
                     _time(K.conv2d_forward_np, (x, w, 1, 1), repeats),
                     _time(K.conv2d_forward_nb, (x, w, 1, 1), repeats)))
        rows.append((f"conv bwd-in {B}x{Ci}->{Co} {H}x{W}",
                     _time(K.conv2d_backward_input_np, (gy, w, 1, 1, H, W), repeats),
                     _time(K.conv2d_backward_input_nb, (gy, w, 1, 1, H, W), repeats)))
        rows.append((f"conv bwd-w {B}x{Ci}->{Co} {H}x{W}",
                     _time(K.conv2d_backward_weight_np, (x, gy, 1, 1, 3, 3), repeats),
                     _time(K.conv2d_backward_weight_nb, (x, gy, 1, 1, 3, 3), repeats)))

    name_w = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{name_w}}  {'numpy':>10}  {'numba':>10}  {'speedup':>8}")
    for name, t_np, t_nb in rows:
        print(f"{name:<{name_w}}  {t_np * 1e3:>8.3f}ms  {t_nb * 1e3:>8.3f}ms  "
              f"{t_np / t_nb:>7.2f}x")


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=20)
    bench(ap.parse_args().repeats)
