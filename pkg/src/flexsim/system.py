"""One simulated device: engine, memory, monitor, NPU, daemon and memory manager."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .daemon import FlexMemDaemon, gib_frames
from .manifest import ModelStore
from .memmgr import DEFAULT_BLOCK_TOKENS, LlmMemoryManager
from .monitor import FlexMonitor, NpuDevice
from .physmem import MemoryLayout, PhysicalMemory
from .timing import Engine, TimingModel


@dataclass
class System:
    engine: Engine
    timing: TimingModel
    mem: PhysicalMemory
    monitor: FlexMonitor
    npu: NpuDevice
    daemon: FlexMemDaemon
    memmgr: LlmMemoryManager
    store: ModelStore
    background_gib: float = 0.0
    seed: int = 0
    # (model_id, layer) -> task chain of a background load still running
    inflight: dict = field(default_factory=dict)

    @classmethod
    def build(cls, *, total_gib: float = 16.0, layout: MemoryLayout | None = None,
              timing: TimingModel | None = None, background_gib: float = 0.0, seed: int = 0,
              frozen: bool = True, block_tokens: int = DEFAULT_BLOCK_TOKENS,
              materialize_kv: bool = False, store: ModelStore | None = None,
              logging: bool = True) -> "System":
        """Wire a device; ``frozen`` starts with protection off (nothing held)."""
        engine = Engine()
        timing = timing or TimingModel()
        if layout is None:
            layout = MemoryLayout(total_frames=gib_frames(total_gib))
        mem = PhysicalMemory(layout, engine)
        mem.logging = logging
        monitor = FlexMonitor(mem, timing, seed=seed)
        npu = NpuDevice(mem)
        daemon = FlexMemDaemon(mem, monitor, timing)
        memmgr = LlmMemoryManager(daemon, timing, block_tokens=block_tokens, seed=seed,
                                  materialize_kv=materialize_kv)
        if background_gib > 0:
            daemon.occupy_background(gib_frames(background_gib), np.random.default_rng(seed))
        if frozen:
            monitor.freeze()
        return cls(engine, timing, mem, monitor, npu, daemon, memmgr,
                   store if store is not None else ModelStore(), background_gib, seed)

    def release_all(self) -> float:
        """Hand every secure allocation back (between independent runs)."""
        latency = 0.0
        mm = self.memmgr
        for rid in list(mm.activations):
            latency += mm._free_activation(mm.activations[rid])
        for sid in list(mm.sequences):
            latency += mm.free_sequence(sid)
        for m in list(mm.weights.layers):
            latency += mm.release_model(m)
        for region in list(self.daemon.cma_regions):
            latency += self.daemon.cma_release(region)
        for g in list(self.daemon.grants.values()):
            latency += self.daemon.release(g, voluntary=False)
        return latency
