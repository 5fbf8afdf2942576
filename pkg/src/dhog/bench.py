"""Micro-benchmarks for the per-batch kernels: joint estimation, Hungarian, matmul, conv2d."""

from __future__ import annotations

import csv
import statistics
import time
from typing import Callable

import numpy as np

from . import autodiff as ad
from .assignment import solve
from .mi import joint, mi_from_joint

BENCH_FIELDS = ["kernel", "n", "c", "k", "median_us"]

DEFAULT_SIZES = [
    {"n": 220, "c": 10, "k": 8},
    {"n": 220, "c": 70, "k": 8},
]


def _time(fn: Callable[[], object], repetitions: int) -> float:
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times) * 1e6


def _softmax_rows(rng, n, c):
    x = rng.standard_normal((n, c))
    e = np.exp(x - x.max(1, keepdims=True))
    return e / e.sum(1, keepdims=True)


def kernels(n: int, c: int, k: int, seed: int = 0) -> dict:
    """Zero-argument callables per kernel, over fixed random fixtures."""
    rng = np.random.default_rng(seed)
    za = ad.tensor(_softmax_rows(rng, n, c), requires_grad=True)
    zb = ad.tensor(_softmax_rows(rng, n, c), requires_grad=True)
    cost = rng.random((c, c))
    a = ad.tensor(rng.standard_normal((n, 64)), requires_grad=True)
    w = ad.tensor(rng.standard_normal((64, 64)), requires_grad=True)
    img = ad.tensor(rng.standard_normal((min(n, 32), 3, 20, 20)), requires_grad=True)
    ker = ad.tensor(rng.standard_normal((32, 3, 3, 3)), requires_grad=True)

    def joint_mi():
        ad.backward(mi_from_joint(joint(za, zb, symmetrize=True)))

    def push_pairs():
        # all k(k-1)/2 head pairs of a k-head push term
        for _ in range(k * (k - 1) // 2):
            mi_from_joint(joint(za, ad.stop_gradient(zb)))

    def conv():
        ad.backward(ad.sum(ad.conv2d(img, ker, stride=2, pad=1)))

    return {
        "joint": lambda: joint(za, zb, symmetrize=True),
        "joint_mi_grad": joint_mi,
        "push_pairs": push_pairs,
        "hungarian": lambda: solve(cost, maximize=True),
        "matmul": lambda: ad.backward(ad.sum(ad.matmul(a, w))),
        "conv2d": conv,
    }


def bench_all(sizes=None, repetitions: int = 5) -> list:
    """Median wall time (microseconds) per kernel per size."""
    if repetitions < 3:
        raise ValueError("use at least 3 repetitions")
    rows = []
    for size in sizes or DEFAULT_SIZES:
        for name, fn in kernels(size["n"], size["c"], size["k"]).items():
            fn()  # warm-up
            rows.append({"kernel": name, **size, "median_us": _time(fn, repetitions)})
    return rows


def write_bench_csv(rows, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=BENCH_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in BENCH_FIELDS})
