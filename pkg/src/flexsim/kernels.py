"""Hot numeric kernels with a jitted path and a pure-numpy path.

Both paths are exact on int64 inputs, so either can serve as a cross-check
for the other.  ``FLEXSIM_DISABLE_NUMBA=1`` forces the numpy path.
"""
import numpy as np

from ._accel import HAVE_NUMBA, njit

__all__ = [
    "flow_shop_finish",
    "serial_finish",
    "take_lowest_free",
    "best_contiguous_window",
    "HAVE_NUMBA",
]


# --------------------------------------------------------------------------
# Pipelined layer schedule.
#
# durations[i, s] is the time of stage s for layer i.  Every stage owns one
# serial channel and every layer passes the stages in order, so
#     finish[i, s] = max(finish[i, s-1], finish[i-1, s]) + durations[i, s]
# which is the longest path through the layer/stage grid.
# --------------------------------------------------------------------------

@njit
def _flow_shop_jit(durations, start):
    n, m = durations.shape
    out = np.empty((n, m), dtype=np.int64)
    for i in range(n):
        for s in range(m):
            t = start
            if s > 0 and out[i, s - 1] > t:
                t = out[i, s - 1]
            if i > 0 and out[i - 1, s] > t:
                t = out[i - 1, s]
            out[i, s] = t + durations[i, s]
    return out


def _flow_shop_numpy(durations, start):
    # finish[:, s] = P[i] + cummax_j(prev[j] - P[j-1]), P = prefix sum of stage s
    n, m = durations.shape
    out = np.empty((n, m), dtype=np.int64)
    prev = np.full(n, start, dtype=np.int64)
    for s in range(m):
        p = np.cumsum(durations[:, s])
        p_shift = np.concatenate(([0], p[:-1]))
        out[:, s] = p + np.maximum.accumulate(prev - p_shift)
        prev = out[:, s]
    return out


def flow_shop_finish(durations, start=0, *, use_numba=None):
    """Finish time of every (layer, stage) cell of a pipelined schedule."""
    d = np.ascontiguousarray(durations, dtype=np.int64)
    if d.ndim != 2:
        raise ValueError("durations must be a 2-D (layers x stages) array")
    if d.shape[0] == 0:
        return np.zeros((0, d.shape[1]), dtype=np.int64)
    if use_numba is None:
        use_numba = HAVE_NUMBA
    if use_numba and HAVE_NUMBA:
        return _flow_shop_jit(d, np.int64(start))
    return _flow_shop_numpy(d, int(start))


def serial_finish(durations, start=0):
    """Finish times when every cell runs back to back on one channel."""
    d = np.asarray(durations, dtype=np.int64)
    return start + np.cumsum(d.ravel()).reshape(d.shape)


# --------------------------------------------------------------------------
# Free-frame selection (lowest index first).
# --------------------------------------------------------------------------

@njit
def _take_lowest_jit(values, target, start, n):
    out = np.empty(n, dtype=np.int64)
    k = 0
    i = start
    size = values.shape[0]
    while k < n and i < size:
        if values[i] == target:
            out[k] = i
            k += 1
        i += 1
    return out[:k]


def take_lowest_free(values, n, start=0, target=True, *, use_numba=None):
    """Indices of the first ``n`` entries equal to ``target`` at or after ``start``."""
    if n <= 0:
        return np.zeros(0, dtype=np.int64)
    if use_numba is None:
        use_numba = HAVE_NUMBA
    if use_numba and HAVE_NUMBA:
        return _take_lowest_jit(values, values.dtype.type(target), np.int64(start), np.int64(n))
    idx = np.flatnonzero(values[start:] == target)[:n]
    return idx.astype(np.int64) + start


# --------------------------------------------------------------------------
# Contiguous window search for the CMA baseline.
#
# A window of ``n`` frames is usable iff it holds no immovable frame; its cost
# is the number of movable frames that compaction must migrate out of it.
# Returns (start, cost) of the cheapest usable window, lowest start on ties,
# or (-1, -1) if none exists.
# --------------------------------------------------------------------------

@njit
def _best_window_jit(immovable, movable, n):
    size = immovable.shape[0]
    if n > size:
        return -1, -1
    bad = 0
    cost = 0
    for i in range(n):
        bad += immovable[i]
        cost += movable[i]
    best_start = -1
    best_cost = -1
    if bad == 0:
        best_start = 0
        best_cost = cost
    for s in range(1, size - n + 1):
        bad += immovable[s + n - 1] - immovable[s - 1]
        cost += movable[s + n - 1] - movable[s - 1]
        if bad == 0 and (best_start < 0 or cost < best_cost):
            best_start = s
            best_cost = cost
    return best_start, best_cost


def _best_window_numpy(immovable, movable, n):
    size = immovable.shape[0]
    if n > size:
        return -1, -1
    ci = np.concatenate(([0], np.cumsum(immovable, dtype=np.int64)))
    cm = np.concatenate(([0], np.cumsum(movable, dtype=np.int64)))
    bad = ci[n:] - ci[:-n]
    cost = cm[n:] - cm[:-n]
    ok = np.flatnonzero(bad == 0)
    if ok.size == 0:
        return -1, -1
    j = ok[np.argmin(cost[ok])]
    return int(j), int(cost[j])


def best_contiguous_window(immovable, movable, n, *, use_numba=None):
    """Cheapest compaction window of ``n`` frames, see module notes."""
    if n <= 0:
        return 0, 0
    im = np.ascontiguousarray(immovable, dtype=np.int64)
    mv = np.ascontiguousarray(movable, dtype=np.int64)
    if use_numba is None:
        use_numba = HAVE_NUMBA
    if use_numba and HAVE_NUMBA:
        s, c = _best_window_jit(im, mv, np.int64(n))
        return int(s), int(c)
    return _best_window_numpy(im, mv, n)
