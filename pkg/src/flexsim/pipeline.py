"""Secure inference pipeline: layer-wise prefill and decode for four modes.

Every layer passes five stages, each on its own serial channel::

    alloc (kernel mmap) -> load (disk DMA) -> protect (monitor + SMMU)
        -> decrypt (secure world) -> compute (NPU or CPU)

so the loading of layer i+1 overlaps the compute of layer i.  The serial
Strawman mode runs every stage on one CPU channel instead.  Cached layers
only compute.

Two ways to get a TTFT:

* :func:`plan_prefill` + :meth:`PrefillPlan.ttft_us` evaluates the closed
  form over the stage matrix with the flow-shop kernel (fast, pure);
* :func:`run_prefill` builds the same stages as engine tasks and executes
  them, optionally against a live :class:`~flexsim.system.System` so that
  every stage also performs its memory and crypto side effects.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import kernels
from .daemon import frames_for
from .errors import DigestMismatch
from .manifest import LayerDescriptor, ModelManifest
from .monitor import NpuMode, ReclaimMode
from .physmem import Access, Actor
from .sealing import OpenFailure, sha256
from .timing import PAGE_SIZE, Engine, Task, TimingModel, apportion_us, us

STAGES = ("alloc", "load", "protect", "decrypt", "compute")
ALLOC, LOAD, PROTECT, DECRYPT, COMPUTE = range(5)
STAGE_CHANNELS = ("mem", "io", "monitor", "crypto", None)


class Mode(str, Enum):
    FLEXSERVE = "FlexServe"
    STRAWMAN_OPT = "StrawmanOpt"
    STRAWMAN = "Strawman"
    NW_BASE = "NwBase"

    @property
    def device(self) -> str:
        return "CPU" if self is Mode.STRAWMAN else "NPU"

    @property
    def pipelined(self) -> bool:
        return self is not Mode.STRAWMAN

    @property
    def uses_cma(self) -> bool:
        return self in (Mode.STRAWMAN, Mode.STRAWMAN_OPT)

    @property
    def secure(self) -> bool:
        return self is not Mode.NW_BASE


def _channel(mode: Mode, stage: int) -> str:
    if not mode.pipelined:
        return "cpu"
    return STAGE_CHANNELS[stage] or mode.device.lower()


# --------------------------------------------------------------------------
# closed-form plan
# --------------------------------------------------------------------------

@dataclass
class PrefillPlan:
    mode: Mode
    model_id: str
    prompt_tokens: int
    cached: int
    durations: np.ndarray                 # int64 [layers, 5], microseconds
    components: dict[str, np.ndarray]     # per-layer parts, microseconds
    setup_parts: dict[str, float]         # ms
    setup_us: int

    @property
    def n_layers(self) -> int:
        return int(self.durations.shape[0])

    @property
    def compute_us(self) -> int:
        return int(self.durations[:, COMPUTE].sum())

    def finish_us(self, *, use_numba=None) -> np.ndarray:
        """Finish time of every cell, relative to the end of setup."""
        if self.mode.pipelined:
            return kernels.flow_shop_finish(self.durations, 0, use_numba=use_numba)
        return kernels.serial_finish(self.durations)

    def ttft_us(self, *, use_numba=None) -> int:
        if self.n_layers == 0:
            return self.setup_us
        return self.setup_us + int(self.finish_us(use_numba=use_numba)[-1, -1])

    def stall_us(self, *, use_numba=None) -> int:
        return self.ttft_us(use_numba=use_numba) - self.setup_us - self.compute_us


def kv_setup_bytes(model: ModelManifest, prompt_tokens: int, block_tokens: int = 16) -> int:
    """Frame-granular KV bytes reserved for the prompt (whole blocks)."""
    per_block = frames_for(block_tokens * model.config.kv_bytes_per_token) * PAGE_SIZE
    return -(-int(prompt_tokens) // block_tokens) * per_block


def activation_setup_bytes(model: ModelManifest, prompt_tokens: int) -> int:
    return frames_for(model.config.activation_bytes(prompt_tokens)) * PAGE_SIZE


def plan_prefill(model: ModelManifest, prompt_tokens: int, mode, timing: TimingModel | None = None,
                 *, cached: int = 0, background_gib: float = 8.0, unfreeze: bool = False,
                 block_tokens: int = 16) -> PrefillPlan:
    """Stage matrix and setup cost of one prefill request.

    ``cached`` is the number of resident leading layers.  ``unfreeze`` adds
    the cost of turning protection back on (FlexServe only).
    """
    mode = Mode(mode)
    t = timing or TimingModel()
    n = model.n_layers
    cached = int(min(max(cached, 0), n))
    tokens = int(prompt_tokens)
    if tokens < 0:
        raise ValueError("prompt_tokens must be non-negative")
    nbytes = model.layer_bytes.astype(np.float64)
    fbytes = model.layer_frames.astype(np.float64) * PAGE_SIZE
    ctbytes = np.array([layer.ciphertext_size for layer in model.layers], dtype=np.float64)
    per_ms = 1.0 / (1 << 30)
    zero = np.zeros(n, dtype=np.int64)

    rate = t.compute_latency(mode.device, 1 << 30, tokens) * per_ms
    comp = apportion_us(rate, nbytes)
    launch = np.full(n, us(t.npu_launch(baseline=mode is not Mode.FLEXSERVE)) if mode.device == "NPU" else 0,
                     dtype=np.int64)
    load = apportion_us(t.load_ms_per_gib * per_ms, ctbytes)
    decrypt = apportion_us(t.decrypt_ms_per_gib * per_ms, nbytes) if mode.secure else zero.copy()
    alloc, protect_s2, smmu = zero.copy(), zero.copy(), zero.copy()
    if mode is Mode.FLEXSERVE:
        alloc = apportion_us(t.mmap_ms_per_gib * per_ms, fbytes)
        protect_s2 = apportion_us(t.flexmem_protect_ms_per_gib * per_ms, fbytes)
        smmu = apportion_us(t.smmu_setup_ms_per_gib * per_ms, fbytes)
    elif mode is Mode.STRAWMAN_OPT:
        smmu = apportion_us(t.smmu_setup_baseline_ms_per_gib * per_ms, fbytes)
    elif mode is Mode.NW_BASE:
        alloc = apportion_us(t.mmap_ms_per_gib * per_ms, fbytes)
        smmu = apportion_us(t.smmu_setup_baseline_ms_per_gib * per_ms, fbytes)

    parts = {"alloc": alloc, "load": load, "stage2": protect_s2, "smmu": smmu,
             "decrypt": decrypt, "compute": comp, "launch": launch}
    for key in ("alloc", "load", "stage2", "smmu", "decrypt"):
        parts[key][:cached] = 0
    d = np.zeros((n, 5), dtype=np.int64)
    d[:, ALLOC] = parts["alloc"]
    d[:, LOAD] = parts["load"]
    d[:, PROTECT] = parts["stage2"] + parts["smmu"]
    d[:, DECRYPT] = parts["decrypt"]
    d[:, COMPUTE] = parts["compute"] + parts["launch"]
    if mode is Mode.FLEXSERVE:
        # protection must take effect strictly before decryption starts
        d[cached:, PROTECT] = np.maximum(d[cached:, PROTECT], 1)

    scratch = kv_setup_bytes(model, tokens, block_tokens) + activation_setup_bytes(model, tokens)
    setup: dict[str, float] = {}
    if mode is Mode.FLEXSERVE:
        if unfreeze:
            setup["unfreeze"] = t.s2pt_boot_ms + t.hash_check_ms
        setup["npu_mode_switch"] = t.npu_mode_switch_ms
        setup["kv_act_alloc"] = t.flexmem_alloc(scratch)
    elif mode.uses_cma:
        uncached = float(fbytes[cached:].sum())
        setup["cma_alloc"] = t.cma_alloc(uncached + scratch, background_gib)
    else:
        setup["kv_act_alloc"] = t.mmap(scratch)
    return PrefillPlan(mode, model.model_id, tokens, cached, d, parts, setup,
                       us(sum(setup.values())))


def ttft_ms(model, prompt_tokens, mode, timing=None, **kw) -> float:
    return plan_prefill(model, prompt_tokens, mode, timing, **kw).ttft_us() / 1000.0


# --------------------------------------------------------------------------
# results
# --------------------------------------------------------------------------

@dataclass
class LayerSpan:
    layer: int
    spans: dict[str, tuple[int, int]]   # stage -> (start_us, finish_us)

    def start(self, stage: str) -> int:
        return self.spans[stage][0]


@dataclass
class PrefillResult:
    mode: Mode
    model_id: str
    prompt_tokens: int
    cached: int
    arrival_us: int
    finish_us: int
    setup_ms: float
    compute_ms: float
    per_layer_timeline: list[LayerSpan]
    cma_region: object = None
    sequence_id: str | None = None
    request_id: str | None = None

    @property
    def ttft_ms(self) -> float:
        return (self.finish_us - self.arrival_us) / 1000.0

    @property
    def stall_ms_total(self) -> float:
        return self.ttft_ms - self.setup_ms - self.compute_ms


# --------------------------------------------------------------------------
# secure loading of one layer
# --------------------------------------------------------------------------

class SecureLoader:
    """The three ordered steps that bring one encrypted layer into Flex-Mem."""

    def __init__(self, system, model: ModelManifest):
        self.system = system
        self.model = model

    def load(self, layer: LayerDescriptor, grant) -> None:
        """(1) disk DMA of the ciphertext into still-unprotected pages."""
        mon, mem = self.system.monitor, self.system.mem
        mon.kernel_smmu_update("disk", grant.pages, map=True)
        blob = self.system.store.blobs.get(layer.ciphertext)
        if blob is not None:
            for i, p in enumerate(grant.pages.tolist()):
                chunk = blob[i * PAGE_SIZE:(i + 1) * PAGE_SIZE]
                if not chunk:
                    break
                mem.dma_access("disk", p, Access.WRITE, chunk)
        mem._log("kernel", "load_layer", {"model": self.model.model_id, "layer": layer.layer_index})

    def protect(self, grant) -> float:
        """(2) switch the pages to Flex-Mem; returns the monitor latency."""
        return self.system.daemon.protect(grant)

    def decrypt(self, layer: LayerDescriptor, grant) -> None:
        """(3) decrypt in place inside the secure world and check the digest."""
        store, mem = self.system.store, self.system.mem
        if layer.ciphertext in store.blobs:
            blob = mem.secure_read(grant.pages, layer.ciphertext_size)
            try:
                plain = store.open_layer(self.model.model_id, layer, blob)
            except OpenFailure as exc:
                raise DigestMismatch(f"layer {layer.layer_index}: {exc}") from exc
            if sha256(plain).hex() != layer.plaintext_digest:
                raise DigestMismatch(f"layer {layer.layer_index}: plaintext digest mismatch")
            mem.secure_write(grant.pages, plain)
        mem._log(Actor.SECURE_WORLD, "decrypt_layer",
                 {"model": self.model.model_id, "layer": layer.layer_index})


def secure_load_layer(system, model: ModelManifest, layer: LayerDescriptor, grant) -> dict[str, float]:
    """Run the three steps back to back; returns their latencies in ms."""
    t = system.timing
    loader = SecureLoader(system, model)
    loader.load(layer, grant)
    try:
        protect_ms = loader.protect(grant)
        loader.decrypt(layer, grant)
    except DigestMismatch:
        system.daemon.release(grant, ReclaimMode.EAGER, voluntary=False)
        raise
    return {"load": t.load(layer.ciphertext_size),
            "protect": protect_ms + t.smmu_setup(grant.nbytes),
            "decrypt": t.decrypt(layer.byte_size)}


# --------------------------------------------------------------------------
# engine execution
# --------------------------------------------------------------------------

@dataclass
class _Job:
    plan: PrefillPlan
    model: ModelManifest
    arrival_us: int
    setup: Task
    cells: list[dict[int, Task]] = field(default_factory=list)
    grants: dict[int, object] = field(default_factory=dict)
    cma_region: object = None
    cma_offset: int = 0
    sequence_id: str | None = None
    request_id: str | None = None


_request_ids = iter(range(1, 1 << 62))


def build_prefill(engine: Engine, model: ModelManifest, plan: PrefillPlan, *, system=None,
                  deps=(), request_id: str | None = None) -> _Job:
    """Add the prefill of ``plan`` to ``engine`` as a task graph."""
    mode = plan.mode
    rid = request_id or f"req{next(_request_ids)}"
    arrival = max([engine.now] + [d.finish_us for d in deps if d.done])
    job = _Job(plan, model, arrival, None, sequence_id=f"{rid}:seq", request_id=rid)
    actor = "FlexServe" if mode.secure else "NormalApp"

    setup = engine.task(f"{rid}:setup", "setup", plan.setup_us, deps=deps, actor=actor,
                        payload={"model": model.model_id, "mode": mode.value},
                        on_start=(lambda t: _setup_effects(system, job)) if system else None)
    job.setup = setup
    n = plan.n_layers
    prev_compute = None
    inflight = system.inflight if system is not None else {}
    for i in range(n):
        cells: dict[int, Task] = {}
        pending = inflight.get((model.model_id, i))
        if i >= plan.cached and pending is None:
            prev = setup
            for s in range(COMPUTE):
                chan = _channel(mode, s)
                cell = engine.task(f"{rid}:{STAGES[s]}:{i}", chan, int(plan.durations[i, s]),
                                   deps=[prev], actor=actor, priority=(i, s),
                                   payload={"model": model.model_id, "layer": i},
                                   on_start=_stage_hook(system, job, i, s) if system else None,
                                   on_finish=_stage_done(system, job, i, s) if system else None)
                cells[s] = cell
                prev = cell
            ready = prev
        elif pending is not None:
            ready = pending
        else:
            ready = setup
        comp = engine.task(f"{rid}:compute:{i}", _channel(mode, COMPUTE),
                           int(plan.durations[i, COMPUTE]), deps=[ready, setup, prev_compute],
                           actor=actor, priority=(i, COMPUTE),
                           payload={"model": model.model_id, "layer": i},
                           on_start=_compute_start(system) if system else None,
                           on_finish=_compute_done(system, job, i) if system else None)
        cells[COMPUTE] = comp
        job.cells.append(cells)
        prev_compute = comp
    return job


def collect(job: _Job) -> PrefillResult:
    plan = job.plan
    timeline = []
    for i, cells in enumerate(job.cells):
        timeline.append(LayerSpan(i, {STAGES[s]: (t.start_us, t.finish_us) for s, t in cells.items()}))
    finish = job.cells[-1][COMPUTE].finish_us if job.cells else job.setup.finish_us
    setup_ms = (job.setup.finish_us - job.setup.start_us) / 1000.0
    compute_ms = sum(c[COMPUTE].duration_us for c in job.cells) / 1000.0
    return PrefillResult(plan.mode, plan.model_id, plan.prompt_tokens, plan.cached, job.arrival_us,
                         finish, setup_ms, compute_ms, timeline, job.cma_region,
                         job.sequence_id, job.request_id)


def run_prefill(model: ModelManifest, prompt_tokens: int, mode, cache=None, *, system=None,
                timing: TimingModel | None = None, engine: Engine | None = None,
                background_gib: float | None = None, request_id: str | None = None) -> PrefillResult:
    """Execute one prefill request on the event engine.

    ``cache`` gives the resident prefix: an int, a ``{model_id: k}`` mapping,
    or a memory manager's weight cache.  With ``system`` the cache defaults
    to the live weight cache and every stage performs its side effects.
    """
    mode = Mode(mode)
    if system is not None:
        timing = system.timing
        engine = system.engine
        if background_gib is None:
            background_gib = system.background_gib
        if cache is None:
            cache = system.memmgr.weights
    timing = timing or TimingModel()
    engine = engine or Engine()
    cached = _cached_layers(cache, model.model_id)
    unfreeze = bool(system is not None and mode is Mode.FLEXSERVE
                    and not system.monitor.protection_enabled)
    plan = plan_prefill(model, prompt_tokens, mode, timing, cached=cached,
                        background_gib=8.0 if background_gib is None else background_gib,
                        unfreeze=unfreeze,
                        block_tokens=system.memmgr.block_tokens if system else 16)
    job = build_prefill(engine, model, plan, system=system, request_id=request_id)
    engine.run_until_quiescent()
    return collect(job)


def _cached_layers(cache, model_id: str) -> int:
    if cache is None:
        return 0
    if isinstance(cache, (int, np.integer)):
        return int(cache)
    if isinstance(cache, dict):
        return int(cache.get(model_id, 0))
    return int(cache.resident(model_id))


# -- side effects -----------------------------------------------------------

def _extra_us(actual_ms: float, nominal_ms: float) -> int:
    return max(0, us(actual_ms - nominal_ms))


def _setup_effects(system, job: _Job) -> int:
    plan, model, t = job.plan, job.model, system.timing
    mode = plan.mode
    mm = system.memmgr
    extra = 0
    if mode is Mode.FLEXSERVE:
        mon = system.monitor
        if not mon.protection_enabled:
            mon.unfreeze()
        mon.npu_set_mode(NpuMode.PROTECTED)
        mm.busy_models.add(model.model_id)
        mm.open_sequence(job.sequence_id, model.model_id, model.config)
        kv_ms = mm.kv_append(job.sequence_id, plan.prompt_tokens)
        act_bytes = activation_setup_bytes(model, plan.prompt_tokens)
        act_ms = mm.alloc_activation(job.request_id, act_bytes) if act_bytes else 0.0
        nominal = t.flexmem_alloc(kv_setup_bytes(model, plan.prompt_tokens, mm.block_tokens) + act_bytes)
        extra = _extra_us(kv_ms + act_ms, nominal)
    elif mode.uses_cma:
        n = int(model.layer_frames[plan.cached:].sum())
        scratch = (kv_setup_bytes(model, plan.prompt_tokens, mm.block_tokens)
                   + activation_setup_bytes(model, plan.prompt_tokens))
        region = system.daemon.cma_allocate(n + scratch // PAGE_SIZE, system.background_gib)
        job.cma_region = region
        extra = _extra_us(region.latency_ms, plan.setup_parts["cma_alloc"])
    else:
        scratch = (kv_setup_bytes(model, plan.prompt_tokens, mm.block_tokens)
                   + activation_setup_bytes(model, plan.prompt_tokens))
        _, lat = system.daemon.mmap_allocate(scratch // PAGE_SIZE)
        extra = _extra_us(lat, plan.setup_parts["kv_act_alloc"])
    return extra


def _stage_hook(system, job: _Job, i: int, s: int):
    mode, model = job.plan.mode, job.model
    layer = model.layers[i]
    loader = SecureLoader(system, model)

    def on_start(task):
        if mode is Mode.FLEXSERVE:
            if s == ALLOC:
                g = system.daemon.allocate_pinned(layer.frames, label=f"{model.model_id}:{i}")
                job.grants[i] = g
                return _extra_us(g.latency_ms, system.timing.mmap(g.nbytes))
            if s == PROTECT:
                g = job.grants[i]
                loader.protect(g)
                return 0
        elif mode is Mode.NW_BASE and s == ALLOC:
            _, lat = system.daemon.mmap_allocate(layer.frames)
            return _extra_us(lat, system.timing.mmap(layer.frames * PAGE_SIZE))
        return 0
    return on_start


def _stage_done(system, job: _Job, i: int, s: int):
    mode, model = job.plan.mode, job.model
    layer = model.layers[i]
    loader = SecureLoader(system, model)

    def on_finish(task):
        if mode is Mode.FLEXSERVE:
            g = job.grants[i]
            if s == LOAD:
                loader.load(layer, g)
            elif s == DECRYPT:
                try:
                    loader.decrypt(layer, g)
                except DigestMismatch:
                    system.daemon.release(g, ReclaimMode.EAGER, voluntary=False)
                    del job.grants[i]
                    raise
                system.memmgr.add_weight_layer(model.model_id, i, g)
        elif mode.uses_cma and s == DECRYPT:
            region = job.cma_region
            blob = system.store.blobs.get(layer.ciphertext)
            if blob is not None:
                plain = system.store.open_layer(model.model_id, layer, blob)
                pages = region.pages[job.cma_offset:job.cma_offset + layer.frames]
                system.mem.secure_write(pages, plain)
            job.cma_offset += layer.frames
    return on_finish


def _compute_start(system):
    def on_start(task):
        system.monitor.task_in_flight = True
        return 0
    return on_start


def _compute_done(system, job: _Job, i: int):
    def on_finish(task):
        system.monitor.task_in_flight = False
        if i == job.plan.n_layers - 1:
            mm = system.memmgr
            mm.complete_request(job.request_id)
            mm.busy_models.discard(job.model.model_id)
            mm.touch_model(job.model.model_id)
    return on_finish


# --------------------------------------------------------------------------
# decode
# --------------------------------------------------------------------------

def decode_step_us(model: ModelManifest, mode, timing: TimingModel) -> int:
    mode = Mode(mode)
    ms = timing.decode_token(mode.device, model.total_bytes, stage2=mode is Mode.FLEXSERVE)
    if mode.device == "NPU":
        ms += timing.npu_launch(baseline=mode is not Mode.FLEXSERVE)
    return us(ms)


def kv_block_alloc_ms(model: ModelManifest, mode, timing: TimingModel, block_tokens: int = 16) -> float:
    mode = Mode(mode)
    nbytes = frames_for(block_tokens * model.config.kv_bytes_per_token) * PAGE_SIZE
    if mode is Mode.FLEXSERVE:
        return timing.flexmem_alloc(nbytes)
    if mode is Mode.NW_BASE:
        return timing.mmap(nbytes)
    return 0.0      # carved out of the CMA region up front


def decode_latencies_us(model: ModelManifest, context_tokens: int, n_new_tokens: int, mode,
                        timing: TimingModel | None = None, block_tokens: int = 16) -> list[int]:
    """Closed-form per-token latencies (microseconds)."""
    t = timing or TimingModel()
    step = decode_step_us(model, mode, t)
    block = us(kv_block_alloc_ms(model, mode, t, block_tokens))
    out = []
    for j in range(int(n_new_tokens)):
        pos = int(context_tokens) + j
        out.append(step + (block if pos % block_tokens == 0 else 0))
    return out


def build_decode(engine: Engine, model: ModelManifest, context_tokens: int, n_new_tokens: int, mode,
                 *, timing: TimingModel, system=None, sequence_id: str | None = None,
                 deps=()) -> list[Task]:
    """Chain one task per generated token on the compute channel."""
    mode = Mode(mode)
    step = decode_step_us(model, mode, timing)
    chan = _channel(mode, COMPUTE)
    bt = system.memmgr.block_tokens if system is not None else 16
    block = us(kv_block_alloc_ms(model, mode, timing, bt))
    tasks, prev = [], None
    for j in range(int(n_new_tokens)):
        pos = int(context_tokens) + j
        grows = pos % bt == 0
        hook = None
        if system is not None and mode is Mode.FLEXSERVE and sequence_id is not None:
            def hook(task, grows=grows):
                mm = system.memmgr
                lat = mm.kv_append(sequence_id, 1)
                mm.touch_sequence(sequence_id)
                return _extra_us(lat, kv_block_alloc_ms(model, mode, timing, bt) if grows else 0.0)
        t = engine.task(f"decode:{model.model_id}:{j}", chan, step + (block if grows else 0),
                        deps=[*deps, prev], actor="FlexServe" if mode.secure else "NormalApp",
                        priority=(-1, j), payload={"model": model.model_id, "token": j},
                        on_start=hook)
        tasks.append(t)
        prev = t
    return tasks


def run_decode(model: ModelManifest, context_tokens: int, n_new_tokens: int, mode, *,
               timing: TimingModel | None = None, system=None,
               sequence_id: str | None = None) -> list[float]:
    """Per-token latency (TBT) in ms of ``n_new_tokens`` decode steps."""
    if n_new_tokens <= 0:
        return []
    engine = system.engine if system is not None else Engine()
    timing = system.timing if system is not None else (timing or TimingModel())
    tasks = build_decode(engine, model, context_tokens, n_new_tokens, mode, timing=timing,
                         system=system, sequence_id=sequence_id)
    engine.run_until_quiescent()
    out, prev = [], None
    for t in tasks:
        begin = t.start_us if prev is None else prev.finish_us
        out.append((t.finish_us - begin) / 1000.0)
        prev = t
    return out
