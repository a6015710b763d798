"""Virtual clock, discrete-event engine and the calibrated latency model.

Time is kept in integer microseconds.  Latency formulas return float
milliseconds; :func:`us` converts, and :func:`apportion_us` splits a
proportional cost over several chunks so the integer parts sum exactly to
the rounded total.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import heapq
import io
import itertools
import json
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

import numpy as np

from .errors import ConfigError, CycleDetected, EngineBusy

GIB = 1 << 30
PAGE_SIZE = 4096


def us(ms: float) -> int:
    """Milliseconds to integer microseconds (round half to even)."""
    return int(round(ms * 1000.0))


def apportion_us(total_ms_per_byte: float, sizes) -> np.ndarray:
    """Integer microsecond cost of each chunk of a byte-proportional cost.

    Chunk ``i`` gets ``us(rate * cum[i+1]) - us(rate * cum[i])``, so the
    chunks always sum to ``us(rate * sum(sizes))``.
    """
    sizes = np.asarray(sizes, dtype=np.float64)
    cum = np.concatenate(([0.0], np.cumsum(sizes)))
    edges = np.rint(cum * total_ms_per_byte * 1000.0).astype(np.int64)
    return np.diff(edges)


# --------------------------------------------------------------------------
# Latency model
# --------------------------------------------------------------------------

@dataclass
class TimingModel:
    """Per-operation latency constants.

    Rates are milliseconds per GiB unless the name says otherwise.  Defaults
    reproduce the measured critical-operation latencies at 8 GiB and the CPU
    vs NPU prefill compute split of an 8 GiB, 128-token cold start.
    """

    flexmem_alloc_ms_per_gib: float = 568.58 / 8
    # mmap-and-pin share of a Flex-Mem allocation; the rest is stage-2 unmapping
    mmap_ms_per_gib: float = 560.0 / 8
    flexmem_reclaim_ms_per_gib: float = 80.50 / 8
    # eager reclaim zeroes the page on top of the remap (baseline reclaim is
    # a full eager zeroing)
    zero_ms_per_gib: float = (732.85 - 80.50) / 8
    cma_reclaim_ms_per_gib: float = 732.85 / 8
    cma_anchor_ms: float = 6440.67
    cma_anchor_size_gib: float = 8.0
    cma_anchor_background_gib: float = 8.0
    # None -> twice the Flex-Mem allocation rate
    cma_zero_pressure_ms_per_gib: float | None = None
    load_ms_per_gib: float = 3265.34 / 8
    decrypt_ms_per_gib: float = 1319.16 / 8
    smmu_setup_ms_per_gib: float = 435.48 / 8
    smmu_setup_baseline_ms_per_gib: float = 429.74 / 8
    npu_task_launch_ms: float = 1.28
    npu_task_launch_baseline_ms: float = 1.26
    npu_mode_switch_ms: float = 0.21
    s2pt_boot_ms: float = 0.13
    hash_check_ms: float = 2.83
    # prefill NPU compute: ms per (GiB of layer weights x prompt token)
    npu_compute_ms_per_gib_token: float = 1940.0 / (8 * 128)
    cpu_compute_multiplier: float = 30.06 / 1.94
    # decode is weight-bandwidth bound; ms per token per GiB of weights
    decode_ms_per_gib: float = 50.0
    # CPU slowdown of two-stage translation while the monitor is active
    stage2_cpu_overhead: float = 0.0246
    # CPU decode vs a stage-2 translated NPU decode step: 24.14% slower
    cpu_decode_multiplier: float = 1.2414 * (1 + 0.0246)
    # penalty for swapping background pages out when free memory runs short
    swap_ms_per_gib: float = 3265.34 / 8
    # flash write for spilled KV pages
    spill_ms_per_gib: float = 3265.34 / 8

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if not isinstance(v, (int, float)) or not v > 0:
                raise ConfigError(f"timing constant must be > 0, got {v!r}", field=f.name)
        if self.mmap_ms_per_gib >= self.flexmem_alloc_ms_per_gib:
            raise ConfigError("mmap share must be below the full Flex-Mem allocation rate",
                              field="mmap_ms_per_gib")
        if self.cma_rate_ms_per_gib(self.cma_anchor_background_gib) < self.cma_rate_ms_per_gib(0.0):
            raise ConfigError("CMA cost must not fall with background pressure",
                              field="cma_zero_pressure_ms_per_gib")

    @classmethod
    def from_overrides(cls, overrides: dict | None = None) -> "TimingModel":
        overrides = dict(overrides or {})
        known = {f.name for f in dataclasses.fields(cls)}
        for key in overrides:
            if key not in known:
                raise ConfigError("unknown timing constant", field=key)
        return cls(**overrides)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    # -- memory ------------------------------------------------------------
    def flexmem_alloc(self, nbytes: int) -> float:
        return self.flexmem_alloc_ms_per_gib * nbytes / GIB

    def mmap(self, nbytes: int) -> float:
        return self.mmap_ms_per_gib * nbytes / GIB

    @property
    def flexmem_protect_ms_per_gib(self) -> float:
        return self.flexmem_alloc_ms_per_gib - self.mmap_ms_per_gib

    def flexmem_protect(self, nbytes: int) -> float:
        return self.flexmem_protect_ms_per_gib * nbytes / GIB

    def flexmem_reclaim(self, nbytes: int, eager: bool = False) -> float:
        rate = self.flexmem_reclaim_ms_per_gib + (self.zero_ms_per_gib if eager else 0.0)
        return rate * nbytes / GIB

    def cma_rate_ms_per_gib(self, background_gib: float) -> float:
        """Piecewise-linear CMA cost per GiB as a function of background use."""
        zero = self.cma_zero_pressure_ms_per_gib
        if zero is None:
            zero = 2.0 * self.flexmem_alloc_ms_per_gib
        anchor = self.cma_anchor_ms / self.cma_anchor_size_gib
        slope = (anchor - zero) / self.cma_anchor_background_gib
        return zero + slope * max(0.0, background_gib)

    def cma_alloc(self, nbytes: int, background_gib: float) -> float:
        return self.cma_rate_ms_per_gib(background_gib) * nbytes / GIB

    def cma_reclaim(self, nbytes: int) -> float:
        return self.cma_reclaim_ms_per_gib * nbytes / GIB

    def swap(self, nbytes: int) -> float:
        return self.swap_ms_per_gib * nbytes / GIB

    # -- io / crypto -------------------------------------------------------
    def load(self, nbytes: int) -> float:
        return self.load_ms_per_gib * nbytes / GIB

    def decrypt(self, nbytes: int) -> float:
        return self.decrypt_ms_per_gib * nbytes / GIB

    def spill(self, nbytes: int) -> float:
        return self.spill_ms_per_gib * nbytes / GIB

    def smmu_setup(self, nbytes: int, baseline: bool = False) -> float:
        rate = self.smmu_setup_baseline_ms_per_gib if baseline else self.smmu_setup_ms_per_gib
        return rate * nbytes / GIB

    def npu_launch(self, baseline: bool = False) -> float:
        return self.npu_task_launch_baseline_ms if baseline else self.npu_task_launch_ms

    # -- compute -----------------------------------------------------------
    def compute_latency(self, device: str, layer_bytes: int, prompt_tokens: int) -> float:
        """Prefill compute of one layer, bilinear in weight bytes and tokens."""
        if layer_bytes < 0 or prompt_tokens < 0:
            raise ValueError("sizes must be non-negative")
        ms = self.npu_compute_ms_per_gib_token * (layer_bytes / GIB) * prompt_tokens
        if device == "CPU":
            return ms * self.cpu_compute_multiplier
        if device != "NPU":
            raise ValueError(f"unknown compute device {device!r}")
        return ms

    def decode_token(self, device: str, model_bytes: int, *, stage2: bool = False) -> float:
        """One decode step, excluding task launch and KV growth."""
        ms = self.decode_ms_per_gib * model_bytes / GIB
        if stage2:
            ms *= 1 + self.stage2_cpu_overhead
        return ms * self.cpu_decode_multiplier if device == "CPU" else ms


# --------------------------------------------------------------------------
# Event log
# --------------------------------------------------------------------------

def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, bytes):
        return value.hex()
    return value


@dataclass(frozen=True)
class SimEvent:
    id: int
    time_us: int
    actor: str
    action: str
    payload: dict = field(default_factory=dict)
    parent: int | None = None

    def to_record(self) -> dict:
        return {"id": self.id, "time_us": self.time_us, "actor": self.actor,
                "action": self.action, "parent": self.parent, "payload": self.payload}


class EventLog:
    """Executed events, totally ordered by (time_us, insertion)."""

    CSV_FIELDS = ("id", "time_us", "actor", "action", "parent", "payload")

    def __init__(self):
        self.events: list[SimEvent] = []

    def append(self, event: SimEvent):
        self.events.append(event)

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def filter(self, action: str | None = None, actor: str | None = None) -> list[SimEvent]:
        return [e for e in self.events
                if (action is None or e.action == action) and (actor is None or e.actor == actor)]

    def to_ndjson(self) -> bytes:
        lines = [json.dumps(e.to_record(), sort_keys=True, separators=(",", ":"))
                 for e in self.events]
        return ("\n".join(lines) + ("\n" if lines else "")).encode()

    def digest(self) -> str:
        return hashlib.sha256(self.to_ndjson()).hexdigest()

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_FIELDS)
        for e in self.events:
            w.writerow([e.id, e.time_us, e.actor, e.action,
                        "" if e.parent is None else e.parent,
                        json.dumps(e.payload, sort_keys=True, separators=(",", ":"))])
        return buf.getvalue()

    def summary_csv(self) -> str:
        """One row per action label: count, first and last timestamp."""
        rows: dict[str, list[int]] = {}
        for e in self.events:
            r = rows.setdefault(e.action, [0, e.time_us, e.time_us])
            r[0] += 1
            r[2] = e.time_us
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("action", "count", "first_time_us", "last_time_us"))
        for action in sorted(rows):
            w.writerow((action, *rows[action]))
        return buf.getvalue()


# --------------------------------------------------------------------------
# Engine
# --------------------------------------------------------------------------

@dataclass(eq=False)
class Task:
    """A timed unit of work that occupies one channel."""

    id: int
    name: str
    channel: str
    duration_us: int
    actor: str
    payload: dict
    priority: tuple
    on_start: Callable[["Task"], int | None] | None = None
    on_finish: Callable[["Task"], None] | None = None
    deps: list["Task"] = field(default_factory=list)
    start_us: int | None = None
    finish_us: int | None = None
    _waiting: int = 0
    _dependents: list["Task"] = field(default_factory=list)

    def after(self, *tasks: "Task") -> "Task":
        self.deps.extend(t for t in tasks if t is not None)
        return self

    @property
    def done(self) -> bool:
        return self.finish_us is not None


class Engine:
    """Min-time-first event loop, ties broken by insertion order.

    Modules never advance time: they return latencies, and callers wrap them
    in tasks or delayed events.  Instant facts are stamped at ``now`` with
    :meth:`record`.
    """

    def __init__(self):
        self.now = 0
        self.log = EventLog()
        self._queue: list = []
        self._seq = itertools.count()
        self._ids = itertools.count()
        self._running = False
        self._tasks: list[Task] = []
        self._channels: dict[str, dict] = {}

    # -- primitive events --------------------------------------------------
    def record(self, actor: str, action: str, payload: dict | None = None,
               parent: int | None = None) -> int:
        eid = next(self._ids)
        self.log.append(SimEvent(eid, self.now, actor, action,
                                 _jsonable(payload or {}), parent))
        return eid

    def schedule(self, action: str, delay_us: int = 0, *, actor: str = "engine",
                 payload: dict | None = None, parent: int | None = None,
                 callback: Callable[[], Any] | None = None) -> int:
        if delay_us < 0:
            raise ValueError("negative delay")
        eid = next(self._ids)
        heapq.heappush(self._queue, (self.now + int(delay_us), next(self._seq), eid,
                                     actor, action, payload, parent, callback))
        return eid

    # -- tasks ---------------------------------------------------------------
    def task(self, name: str, channel: str, duration_us: int, *, deps: Iterable[Task] = (),
             actor: str = "engine", payload: dict | None = None, priority: tuple = (),
             on_start=None, on_finish=None) -> Task:
        if duration_us < 0:
            raise ValueError("negative duration")
        t = Task(next(self._ids), name, channel, int(duration_us), actor, dict(payload or {}),
                 priority, on_start, on_finish)
        t.after(*deps)
        self._tasks.append(t)
        return t

    def _check_cycles(self, tasks: list[Task]):
        state: dict[int, int] = {}
        for root in tasks:
            if state.get(root.id) == 2:
                continue
            stack = [(root, iter(root.deps))]
            state[root.id] = 1
            while stack:
                node, it = stack[-1]
                nxt = next(it, None)
                if nxt is None:
                    state[node.id] = 2
                    stack.pop()
                    continue
                if nxt.done:
                    continue
                s = state.get(nxt.id)
                if s == 1:
                    raise CycleDetected(f"task {nxt.name!r} transitively awaits itself")
                if s is None:
                    state[nxt.id] = 1
                    stack.append((nxt, iter(nxt.deps)))

    def _arm_tasks(self):
        fresh = [t for t in self._tasks if t.start_us is None]
        self._tasks = []
        self._check_cycles(fresh)
        for t in fresh:
            t._waiting = 0
        for t in fresh:
            for d in t.deps:
                if not d.done:
                    t._waiting += 1
                    d._dependents.append(t)
        for t in fresh:
            if t._waiting == 0:
                self._make_ready(t)

    def _chan(self, name):
        ch = self._channels.get(name)
        if ch is None:
            ch = self._channels[name] = {"busy": False, "ready": []}
        return ch

    def _make_ready(self, t: Task):
        ch = self._chan(t.channel)
        heapq.heappush(ch["ready"], (t.priority, next(self._seq), t))
        if not ch["busy"]:
            self.schedule("dispatch", 0, actor="engine", callback=lambda c=t.channel: self._dispatch(c))

    def _dispatch(self, channel):
        ch = self._chan(channel)
        if ch["busy"] or not ch["ready"]:
            return
        _, _, t = heapq.heappop(ch["ready"])
        ch["busy"] = True
        t.start_us = self.now
        if t.on_start is not None:
            # a start hook may report extra latency found while doing the work
            extra = t.on_start(t)
            if extra:
                t.duration_us += int(extra)
        self.record(t.actor, f"start:{t.name}", {"channel": channel, **t.payload})
        self.schedule(f"finish:{t.name}", t.duration_us, actor=t.actor,
                      payload={"channel": channel, **t.payload},
                      callback=lambda t=t: self._finish(t))

    def _finish(self, t: Task):
        t.finish_us = self.now
        if t.on_finish is not None:
            t.on_finish(t)
        ch = self._chan(t.channel)
        ch["busy"] = False
        for d in t._dependents:
            d._waiting -= 1
            if d._waiting == 0:
                self._make_ready(d)
        t._dependents = []
        self._dispatch(t.channel)

    # -- main loop -----------------------------------------------------------
    def run_until_quiescent(self) -> EventLog:
        if self._running:
            raise EngineBusy("engine already running")
        self._running = True
        try:
            self._arm_tasks()
            while self._queue:
                time_us, _, eid, actor, action, payload, parent, cb = heapq.heappop(self._queue)
                self.now = time_us
                if action != "dispatch":
                    self.log.append(SimEvent(eid, time_us, actor, action,
                                             _jsonable(payload or {}), parent))
                if cb is not None:
                    cb()
                if self._tasks:
                    self._arm_tasks()
        finally:
            self._running = False
        return self.log
