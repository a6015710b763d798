"""Timing of the jitted kernels against their numpy twins."""
from __future__ import annotations

import time

import numpy as np

from .. import kernels

SHAPES = ((32, 5), (128, 5), (1024, 5))


def _best_of(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_benchmark(seed: int = 0, repeat: int = 20, frames: int = 1 << 20) -> list[dict]:
    """Best-of-``repeat`` seconds per call for each kernel and path.

    When numba is unavailable or disabled both columns time the numpy path.
    """
    rng = np.random.default_rng(seed)
    rows = []
    cases = []
    for shape in SHAPES:
        d = rng.integers(0, 50_000, shape).astype(np.int64)
        cases.append((f"flow_shop {shape[0]}x{shape[1]}",
                      lambda nb, d=d: kernels.flow_shop_finish(d, use_numba=nb)))
    free = rng.random(frames) < 0.5
    cases.append((f"take_lowest_free {frames}",
                  lambda nb: kernels.take_lowest_free(free, frames // 4, use_numba=nb)))
    immovable = rng.random(frames) < 0.01
    movable = ~immovable & (rng.random(frames) < 0.5)
    cases.append((f"best_contiguous_window {frames}",
                  lambda nb: kernels.best_contiguous_window(immovable, movable, frames // 8,
                                                            use_numba=nb)))
    for name, fn in cases:
        a, b = fn(True), fn(False)
        same = all(np.array_equal(x, y) for x, y in zip(np.atleast_1d(a), np.atleast_1d(b))) \
            if isinstance(a, tuple) else np.array_equal(a, b)
        rows.append({"kernel": name, "numba_s": _best_of(lambda: fn(True), repeat),
                     "numpy_s": _best_of(lambda: fn(False), repeat), "identical": bool(same)})
    for r in rows:
        r["speedup"] = r["numpy_s"] / r["numba_s"] if r["numba_s"] else float("nan")
    return rows
