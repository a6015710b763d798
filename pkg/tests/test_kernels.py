import functools

import numpy as np
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flexsim import kernels


def _longest_path(d):
    """Finish time of each cell as the longest path in the layer/stage DAG."""
    n, m = d.shape

    @functools.lru_cache(maxsize=None)
    def f(i, s):
        best = 0
        if i > 0:
            best = max(best, f(i - 1, s))
        if s > 0:
            best = max(best, f(i, s - 1))
        return best + int(d[i, s])
    return np.array([[f(i, s) for s in range(m)] for i in range(n)], dtype=np.int64)


durations = st.integers(1, 12).flatmap(
    lambda n: arrays(np.int64, (n, 5), elements=st.integers(0, 10_000)))


@given(durations)
def test_flow_shop_matches_dag_longest_path(d):
    want = _longest_path(d)
    assert np.array_equal(kernels.flow_shop_finish(d, use_numba=False), want)
    assert np.array_equal(kernels.flow_shop_finish(d, use_numba=True), want)


@given(durations, st.integers(0, 1000))
def test_flow_shop_start_offset(d, start):
    base = kernels.flow_shop_finish(d)
    assert np.array_equal(kernels.flow_shop_finish(d, start), base + start)


@given(durations)
def test_serial_is_a_cumulative_sum(d):
    out = kernels.serial_finish(d)
    assert out[-1, -1] == d.sum()
    assert np.array_equal(out.ravel(), np.cumsum(d.ravel()))


@given(arrays(np.bool_, st.integers(1, 300)), st.integers(0, 300), st.integers(0, 299))
def test_take_lowest_free_paths_agree(mask, n, start):
    start = min(start, mask.size - 1)
    a = kernels.take_lowest_free(mask, n, start, True, use_numba=True)
    b = kernels.take_lowest_free(mask, n, start, True, use_numba=False)
    assert np.array_equal(a, b)
    want = np.flatnonzero(mask[start:])[:n] + start
    assert np.array_equal(b, want)


@given(arrays(np.uint8, st.integers(1, 200), elements=st.integers(0, 2)), st.integers(1, 60))
def test_best_window_paths_agree_and_are_optimal(kind, n):
    immovable = kind == 2
    movable = kind == 1
    a = kernels.best_contiguous_window(immovable, movable, n, use_numba=True)
    b = kernels.best_contiguous_window(immovable, movable, n, use_numba=False)
    assert tuple(map(int, a)) == tuple(map(int, b))
    # brute force: cheapest window free of immovable frames, lowest base on ties
    best = (-1, 0)
    for base in range(kind.size - n + 1):
        w = slice(base, base + n)
        if immovable[w].any():
            continue
        cost = int(movable[w].sum())
        if best[0] < 0 or cost < best[1]:
            best = (base, cost)
    assert int(b[0]) == best[0]
    if best[0] >= 0:
        assert int(b[1]) == best[1]
