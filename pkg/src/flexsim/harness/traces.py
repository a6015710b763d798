"""Randomized memory-manager traces with exact accounting checks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import Insufficient, OutOfMemory, SealVerifyFailure
from ..manifest import ModelConfig, synthetic_manifest
from ..physmem import MemoryLayout, PageState
from ..system import System
from ..timing import PAGE_SIZE

EVENTS = ("load_layer", "evict_tail", "reclaim", "open_seq", "append", "close_seq", "advance",
          "offload", "restore", "free_seq", "alloc_act", "complete", "release_model", "touch")


@dataclass
class TraceStats:
    events: int = 0
    counts: dict[str, int] = field(default_factory=dict)
    roundtrips: int = 0
    roundtrip_mismatches: int = 0
    accounting_errors: list[str] = field(default_factory=list)
    prefix_violations: list[str] = field(default_factory=list)
    max_flexmem_frames: int = 0

    @property
    def ok(self) -> bool:
        return not (self.accounting_errors or self.prefix_violations or self.roundtrip_mismatches)


def trace_system(seed: int = 0, frames: int = 128) -> System:
    layout = MemoryLayout(total_frames=frames, tz_frames=4, mmio={"npu": 2, "smmu": 1},
                          monitor_frames=4, driver_code_frames=2, driver_data_frames=2)
    return System.build(layout=layout, frozen=False, seed=seed, block_tokens=4,
                        materialize_kv=True, logging=False)


def trace_models():
    return {
        "m0": synthetic_manifest("m0", total_bytes=48 * PAGE_SIZE, config=ModelConfig(6, 1, 16, 64, 2)),
        "m1": synthetic_manifest("m1", total_bytes=32 * PAGE_SIZE, config=ModelConfig(4, 2, 16, 64, 2)),
        "m2": synthetic_manifest("m2", total_bytes=64 * PAGE_SIZE, config=ModelConfig(8, 1, 32, 64, 2)),
    }


def _independent_total(system) -> int:
    """Secure bytes recomputed from the daemon's grants rather than the manager's books."""
    mm = system.memmgr
    tracked = {id(g) for lst in mm.weights.layers.values() for g in lst}
    tracked |= {id(p.grant) for p in mm.kv_pages.values() if p.grant is not None}
    tracked |= {id(r.grant) for r in mm.activations.values()}
    return sum(g.frames * PAGE_SIZE for g in system.daemon.grants.values() if id(g) in tracked)


def run_memmgr_trace(seed: int = 0, n_events: int = 1000, *, system: System | None = None) -> TraceStats:
    rng = np.random.default_rng(seed)
    s = system or trace_system(seed)
    mm, daemon, engine = s.memmgr, s.daemon, s.engine
    models = trace_models()
    for m in models.values():
        mm.set_zero_stall(m.model_id, int(rng.integers(0, m.n_layers + 1)))
    stats = TraceStats()
    seq_n = act_n = 0
    expected_kv: dict[tuple[str, int], bytes] = {}

    def open_seqs():
        return [sid for sid, q in mm.sequences.items() if not q.closed]

    for _ in range(n_events):
        ev = EVENTS[int(rng.integers(len(EVENTS)))]
        stats.counts[ev] = stats.counts.get(ev, 0) + 1
        try:
            if ev == "load_layer":
                m = models[f"m{int(rng.integers(3))}"]
                i = mm.resident_layers(m.model_id)
                if i < m.n_layers:
                    g = daemon.flexmem_allocate(int(m.layer_frames[i]), label=f"{m.model_id}:{i}")
                    mm.add_weight_layer(m.model_id, i, g)
            elif ev == "evict_tail":
                m = f"m{int(rng.integers(3))}"
                if mm.resident_layers(m):
                    mm.evict_weight_tail(m)
            elif ev == "reclaim":
                try:
                    mm.reclaim(int(rng.integers(1, 64)))
                except Insufficient:
                    pass
            elif ev == "open_seq":
                m = models[f"m{int(rng.integers(3))}"]
                seq_n += 1
                mm.open_sequence(f"s{seq_n}", m.model_id, m.config)
            elif ev == "append":
                live = open_seqs()
                if live:
                    mm.kv_append(live[int(rng.integers(len(live)))], int(rng.integers(1, 9)))
            elif ev == "close_seq":
                live = open_seqs()
                if live:
                    mm.close_sequence(live[int(rng.integers(len(live)))])
            elif ev == "advance":
                engine.schedule("idle", int(rng.integers(1, 40_000_000)), actor="trace")
                engine.run_until_quiescent()
            elif ev == "offload":
                lru = mm._lru_resident()
                if lru:
                    n = int(rng.integers(1, min(4, len(lru)) + 1))
                    for p in lru[:n]:
                        expected_kv[p.key] = mm.kv_content(p)
                    mm.kv_offload(n)
            elif ev == "restore":
                spilled = [p for p in mm.kv_pages.values() if p.grant is None]
                if spilled:
                    p = spilled[int(rng.integers(len(spilled)))]
                    mm.kv_restore(p)
                    want = expected_kv.pop(p.key, None)
                    if want is not None:
                        stats.roundtrips += 1
                        if mm.kv_content(p) != want:
                            stats.roundtrip_mismatches += 1
            elif ev == "free_seq":
                if mm.sequences:
                    sids = sorted(mm.sequences)
                    sid = sids[int(rng.integers(len(sids)))]
                    for p in mm.sequences[sid].pages:
                        expected_kv.pop(p.key, None)
                    mm.free_sequence(sid)
            elif ev == "alloc_act":
                act_n += 1
                mm.alloc_activation(f"r{act_n}", int(rng.integers(1, 6)) * PAGE_SIZE)
            elif ev == "complete":
                live = sorted(r for r, a in mm.activations.items() if not a.completed)
                if live:
                    mm.complete_request(live[int(rng.integers(len(live)))])
            elif ev == "release_model":
                m = f"m{int(rng.integers(3))}"
                mm.release_model(m, keep=int(rng.integers(0, 3)))
            elif ev == "touch":
                m = f"m{int(rng.integers(3))}"
                mm.touch_model(m)
        except OutOfMemory:
            pass
        except SealVerifyFailure as exc:
            stats.accounting_errors.append(f"{ev}: {exc}")
        # pages dropped by reclaim lose their spill copy
        for key in [k for k in expected_kv if k not in mm.kv_pages]:
            del expected_kv[key]
        stats.events += 1
        _check(s, stats, ev)
    return stats


def _check(s: System, stats: TraceStats, ev: str):
    mm = s.memmgr
    flex = s.mem.count(PageState.FLEXMEM)
    stats.max_flexmem_frames = max(stats.max_flexmem_frames, flex)
    books = sum(mm.resident_bytes().values())
    indep = _independent_total(s)
    if not (books == indep == flex * PAGE_SIZE):
        stats.accounting_errors.append(
            f"after {ev}: books {books} B, grants {indep} B, Flex-Mem {flex * PAGE_SIZE} B")
    for m, lst in mm.weights.layers.items():
        labels = [g.label for g in lst]
        if labels != [f"{m}:{i}" for i in range(len(lst))]:
            stats.prefix_violations.append(f"after {ev}: {m} holds {labels}")
