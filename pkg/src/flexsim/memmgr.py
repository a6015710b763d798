"""LLM-aware memory management on top of Flex-Mem.

Three kinds of secure memory are tracked, each with its own lifetime:

* weights, cached per model as a prefix of layers (never spilled, only
  released, since they can be reloaded from the encrypted model file);
* KV cache, in blocks of ``block_tokens`` tokens, sealed and spilled to
  flash when cold;
* activations, one region per request, freed as soon as the request ends.

All latencies are returned in milliseconds; the caller places them on the
engine.  Time stamps (``last_use``, ``closed_at``) are engine microseconds.
"""
from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field

import numpy as np

from .daemon import AllocationGrant, FlexMemDaemon, frames_for
from .errors import Insufficient, InvariantViolation, OutOfMemory, SealVerifyFailure
from .manifest import ModelConfig
from .monitor import ReclaimMode
from .physmem import PageState
from .sealing import OpenFailure, Sealer, derive_key
from .timing import PAGE_SIZE, TimingModel

DEFAULT_BLOCK_TOKENS = 16
DEFAULT_IDLE_TIMEOUT_US = 60_000_000


# --------------------------------------------------------------------------
# weights
# --------------------------------------------------------------------------

class WeightCacheState:
    """Resident layer prefix of every model, with the grant behind each layer."""

    def __init__(self):
        self.layers: dict[str, list[AllocationGrant]] = {}

    def resident(self, model_id: str) -> int:
        return len(self.layers.get(model_id, ()))

    def as_dict(self) -> dict[str, int]:
        return {m: len(v) for m, v in self.layers.items() if v}

    def add(self, model_id: str, index: int, grant: AllocationGrant) -> None:
        lst = self.layers.setdefault(model_id, [])
        if index != len(lst):
            raise InvariantViolation(
                f"{model_id}: caching layer {index} with only {len(lst)} earlier layers resident")
        lst.append(grant)

    def pop_tail(self, model_id: str) -> AllocationGrant:
        return self.layers[model_id].pop()

    def bytes(self) -> int:
        return sum(g.nbytes for lst in self.layers.values() for g in lst)

    def grants(self):
        for lst in self.layers.values():
            yield from lst


# --------------------------------------------------------------------------
# KV cache
# --------------------------------------------------------------------------

@dataclass(eq=False)
class KvPage:
    model_id: str
    sequence_id: str
    block: int
    token_start: int
    token_count: int
    nbytes: int
    grant: AllocationGrant | None = None
    blob: bytes | None = None
    last_use: int = 0
    tick: int = 0

    @property
    def key(self) -> tuple[str, int]:
        return (self.sequence_id, self.block)

    @property
    def location(self) -> str:
        return "FlexMem" if self.grant is not None else "SpilledEncrypted"

    @property
    def token_range(self) -> tuple[int, int]:
        return (self.token_start, self.token_start + self.token_count)


@dataclass(eq=False)
class Sequence:
    sequence_id: str
    model_id: str
    config: ModelConfig
    tokens: int = 0
    pages: list[KvPage] = field(default_factory=list)
    closed_at: int | None = None

    @property
    def closed(self) -> bool:
        return self.closed_at is not None


@dataclass(eq=False)
class ActivationRegion:
    request_id: str
    grant: AllocationGrant
    peak_bytes: int
    completed: bool = False

    @property
    def pages(self) -> np.ndarray:
        return self.grant.pages


@dataclass(frozen=True)
class Victim:
    kind: str      # activation | kv | weight
    action: str    # free | offload | drop | release
    ref: object
    frames: int
    tier: int


class LruModelPolicy:
    """Model-level replacement order: least recently used model first."""

    name = "lru"

    def order(self, models: list[str], last_use: dict[str, int]) -> list[str]:
        return sorted(models, key=lambda m: (last_use.get(m, 0), m))


# --------------------------------------------------------------------------

class LlmMemoryManager:
    FOOTPRINT_FIELDS = ("time", "weights_bytes", "kv_bytes", "act_bytes", "free_frames")

    def __init__(self, daemon: FlexMemDaemon, timing: TimingModel | None = None, *,
                 block_tokens: int = DEFAULT_BLOCK_TOKENS,
                 idle_timeout_us: int = DEFAULT_IDLE_TIMEOUT_US,
                 seed: int = 0, materialize_kv: bool = True,
                 free_activations_on_completion: bool = True):
        if block_tokens <= 0:
            raise ValueError("block_tokens must be positive")
        self.daemon = daemon
        self.mem = daemon.mem
        self.engine = daemon.mem.engine
        self.timing = timing or daemon.timing
        self.block_tokens = int(block_tokens)
        self.idle_timeout_us = int(idle_timeout_us)
        self.materialize_kv = materialize_kv
        self.free_activations_on_completion = free_activations_on_completion
        self.seed = seed

        self.weights = WeightCacheState()
        self.zero_stall: dict[str, int] = {}
        self.model_last_use: dict[str, int] = {}
        self.busy_models: set[str] = set()
        self.model_policy = LruModelPolicy()

        self.sequences: dict[str, Sequence] = {}
        self.kv_pages: dict[tuple[str, int], KvPage] = {}
        self.activations: dict[str, ActivationRegion] = {}

        self.access_log: list[tuple[int, int, tuple[str, int], str]] = []
        self.footprints: list[tuple[int, int, int, int, int]] = []
        self._ticks = itertools.count(1)
        self._sealer = Sealer(derive_key(seed, "kv-spill"), nonce_prefix=b"kv\0\0")
        daemon.framework = self

    def _log(self, action, payload):
        self.mem._log("SecureWorld", action, payload)

    # ------------------------------------------------------------ weights
    def add_weight_layer(self, model_id: str, index: int, grant: AllocationGrant) -> None:
        self.weights.add(model_id, index, grant)
        self.touch_model(model_id)

    def resident_layers(self, model_id: str) -> int:
        return self.weights.resident(model_id)

    def set_zero_stall(self, model_id: str, k: int) -> None:
        self.zero_stall[model_id] = int(k)

    def touch_model(self, model_id: str, now: int | None = None) -> None:
        self.model_last_use[model_id] = self.engine.now if now is None else int(now)

    def evict_weight_tail(self, model_id: str, mode=ReclaimMode.LAZY) -> float:
        grant = self.weights.pop_tail(model_id)
        latency = self.daemon.release(grant, mode, voluntary=False)
        self._log("evict_layer", {"model": model_id, "layer": self.weights.resident(model_id),
                                  "frames": grant.frames})
        return latency

    def release_model(self, model_id: str, keep: int = 0) -> float:
        """Drop cached layers of ``model_id`` down to ``keep`` (tail first)."""
        latency = 0.0
        while self.weights.resident(model_id) > keep:
            latency += self.evict_weight_tail(model_id)
        return latency

    # ------------------------------------------------------------- KV cache
    def open_sequence(self, sequence_id: str, model_id: str, config: ModelConfig) -> Sequence:
        if sequence_id in self.sequences:
            seq = self.sequences[sequence_id]
            if seq.model_id != model_id:
                raise ValueError(f"sequence {sequence_id} belongs to {seq.model_id}")
            seq.closed_at = None
            return seq
        seq = self.sequences[sequence_id] = Sequence(sequence_id, model_id, config)
        return seq

    def close_sequence(self, sequence_id: str) -> None:
        self.sequences[sequence_id].closed_at = self.engine.now

    def _kv_content(self, page: KvPage) -> bytes:
        rng = np.random.default_rng([self.seed, sum(page.sequence_id.encode()), page.block])
        return rng.integers(0, 256, page.nbytes, dtype=np.uint8).tobytes()

    def _note(self, page: KvPage, event: str, now: int | None = None):
        page.last_use = self.engine.now if now is None else int(now)
        page.tick = next(self._ticks)
        self.access_log.append((page.last_use, page.tick, page.key, event))

    def touch(self, page: KvPage, now: int | None = None) -> None:
        self._note(page, "touch", now)

    def touch_sequence(self, sequence_id: str, now: int | None = None) -> None:
        for page in self.sequences[sequence_id].pages:
            if page.grant is not None:
                self._note(page, "touch", now)

    def _alloc_kv_frames(self, page: KvPage) -> tuple[AllocationGrant, float]:
        n = frames_for(page.nbytes)
        latency = 0.0
        try:
            grant = self.daemon.flexmem_allocate(n, label=f"kv:{page.sequence_id}:{page.block}")
        except OutOfMemory:
            # spill the coldest pages of other sequences and retry once
            cold = [p for p in self._lru_resident() if p is not page]
            need, picked = n, []
            for p in cold:
                if need <= 0:
                    break
                picked.append(p)
                need -= p.grant.frames
            if need > 0:
                raise
            for p in picked:
                latency += self._offload_page(p)
            grant = self.daemon.flexmem_allocate(n, label=f"kv:{page.sequence_id}:{page.block}")
        return grant, latency + grant.latency_ms

    def kv_append(self, sequence_id: str, n_tokens: int) -> float:
        """Grow a sequence by ``n_tokens``; a new block is allocated per boundary."""
        seq = self.sequences[sequence_id]
        bpt = seq.config.kv_bytes_per_token
        latency = 0.0
        remaining = int(n_tokens)
        while remaining > 0:
            last = seq.pages[-1] if seq.pages else None
            if last is None or last.token_count == self.block_tokens:
                page = KvPage(seq.model_id, sequence_id, len(seq.pages), seq.tokens, 0,
                              self.block_tokens * bpt)
                if last is not None and last.grant is None:
                    latency += self.kv_restore(last)
                page.grant, lat = self._alloc_kv_frames(page)
                latency += lat
                if self.materialize_kv:
                    self.mem.secure_write(page.grant.pages, self._kv_content(page))
                seq.pages.append(page)
                self.kv_pages[page.key] = page
                self._log("kv_block", {"sequence": sequence_id, "block": page.block,
                                       "frames": page.grant.frames})
                last = page
            elif last.grant is None:
                latency += self.kv_restore(last)
            take = min(remaining, self.block_tokens - last.token_count)
            last.token_count += take
            seq.tokens += take
            remaining -= take
            self._note(last, "append")
        return latency

    def kv_bytes_for(self, config: ModelConfig, tokens: int) -> int:
        """Frame-granular KV footprint of ``tokens`` tokens of one sequence."""
        blocks = -(-int(tokens) // self.block_tokens)
        return blocks * frames_for(self.block_tokens * config.kv_bytes_per_token) * PAGE_SIZE

    def _lru_resident(self) -> list[KvPage]:
        res = [p for p in self.kv_pages.values() if p.grant is not None]
        res.sort(key=lambda p: (p.last_use, p.tick))
        return res

    def lru_order(self) -> list[tuple[str, int]]:
        return [p.key for p in self._lru_resident()]

    def _aad(self, page: KvPage) -> bytes:
        return f"{page.model_id}|{page.sequence_id}|{page.block}".encode()

    def _offload_page(self, page: KvPage) -> float:
        data = self.mem.secure_read(page.grant.pages, page.nbytes)
        page.blob = self._sealer.seal(data, self._aad(page))
        grant, page.grant = page.grant, None
        latency = (self.timing.decrypt(page.nbytes) + self.timing.spill(len(page.blob))
                   + self.daemon.release(grant, ReclaimMode.LAZY, voluntary=False))
        self.access_log.append((self.engine.now, next(self._ticks), page.key, "offload"))
        self._log("kv_offload", {"sequence": page.sequence_id, "block": page.block,
                                 "frames": grant.frames})
        return latency

    def _drop_page(self, page: KvPage) -> float:
        grant, page.grant = page.grant, None
        latency = self.daemon.release(grant, ReclaimMode.LAZY, voluntary=False)
        del self.kv_pages[page.key]
        seq = self.sequences.get(page.sequence_id)
        if seq is not None:
            seq.pages = [p for p in seq.pages if p is not page]
        self.access_log.append((self.engine.now, next(self._ticks), page.key, "drop"))
        self._log("kv_drop", {"sequence": page.sequence_id, "block": page.block})
        return latency

    def kv_offload(self, n_pages: int) -> float:
        """Seal and spill the ``n_pages`` least recently used resident KV pages."""
        lru = self._lru_resident()
        if n_pages > len(lru):
            raise Insufficient(f"{n_pages} pages requested, {len(lru)} resident", 0.0)
        return sum(self._offload_page(p) for p in lru[:n_pages])

    def kv_restore(self, page: KvPage) -> float:
        if page.grant is not None:
            return 0.0
        try:
            data = self._sealer.open(page.blob, self._aad(page))
        except OpenFailure as exc:
            raise SealVerifyFailure(
                f"spilled KV block {page.sequence_id}:{page.block} failed authentication") from exc
        grant = self.daemon.flexmem_allocate(frames_for(page.nbytes),
                                             label=f"kv:{page.sequence_id}:{page.block}")
        self.mem.secure_write(grant.pages, data)
        page.grant, page.blob = grant, None
        self._note(page, "restore")
        self._log("kv_restore", {"sequence": page.sequence_id, "block": page.block})
        return (grant.latency_ms + self.timing.load(len(data) + 28)
                + self.timing.decrypt(len(data)))

    def kv_content(self, page: KvPage) -> bytes:
        return self.mem.secure_read(page.grant.pages, page.nbytes)

    def free_sequence(self, sequence_id: str) -> float:
        seq = self.sequences.pop(sequence_id)
        latency = 0.0
        for page in seq.pages:
            if page.grant is not None:
                latency += self.daemon.release(page.grant, ReclaimMode.LAZY, voluntary=False)
            self.kv_pages.pop(page.key, None)
        return latency

    # ----------------------------------------------------------- activations
    def alloc_activation(self, request_id: str, nbytes: int) -> float:
        grant = self.daemon.flexmem_allocate(frames_for(nbytes), label=f"act:{request_id}")
        self.activations[request_id] = ActivationRegion(request_id, grant, int(nbytes))
        return grant.latency_ms

    def complete_request(self, request_id: str) -> float:
        region = self.activations.get(request_id)
        if region is None:
            return 0.0
        region.completed = True
        if not self.free_activations_on_completion:
            return 0.0
        return self._free_activation(region)

    def _free_activation(self, region: ActivationRegion) -> float:
        del self.activations[region.request_id]
        return self.daemon.release(region.grant, ReclaimMode.LAZY, voluntary=False)

    # -------------------------------------------------------------- reclaim
    def _droppable(self, page: KvPage) -> bool:
        seq = self.sequences.get(page.sequence_id)
        return (seq is None or (seq.closed and
                                self.engine.now - seq.closed_at >= self.idle_timeout_us))

    def _model_order(self) -> list[str]:
        models = [m for m, lst in self.weights.layers.items() if lst and m not in self.busy_models]
        return self.model_policy.order(models, self.model_last_use)

    def _candidates(self):
        for region in sorted(self.activations.values(), key=lambda r: r.request_id):
            if region.completed:
                yield Victim("activation", "free", region, region.grant.frames, 1)
        for page in self._lru_resident():
            action = "drop" if self._droppable(page) else "offload"
            yield Victim("kv", action, page, page.grant.frames, 2)
        models = self._model_order()
        # tail layers above each model's zero-stall prefix, then the prefixes
        for tier, floor_of in ((3, lambda m: self.zero_stall.get(m, 0)), (4, lambda m: 0)):
            for m in models:
                lst = self.weights.layers[m]
                lo = floor_of(m) if tier == 3 else 0
                hi = len(lst) if tier == 3 else min(len(lst), self.zero_stall.get(m, 0))
                for i in range(hi - 1, lo - 1, -1):
                    yield Victim("weight", "release", (m, i), lst[i].frames, tier)

    def select_reclaim_victims(self, n_frames: int) -> list[Victim]:
        """Victims in eviction order whose frames cover ``n_frames``."""
        out, got = [], 0
        if n_frames <= 0:
            return out
        for v in self._candidates():
            out.append(v)
            got += v.frames
            if got >= n_frames:
                return out
        raise Insufficient(f"{n_frames} frames requested, only {got} evictable", out)

    def _apply(self, v: Victim) -> float:
        if v.kind == "activation":
            return self._free_activation(v.ref)
        if v.kind == "kv":
            return self._drop_page(v.ref) if v.action == "drop" else self._offload_page(v.ref)
        model_id, index = v.ref
        if index != self.weights.resident(model_id) - 1:
            raise InvariantViolation("weight eviction must take the tail layer")
        return self.evict_weight_tail(model_id)

    def reclaim(self, n_frames: int, reason: str = "kernel") -> float:
        try:
            victims = self.select_reclaim_victims(n_frames)
            short = None
        except Insufficient as exc:
            victims, short = exc.args[1], exc
        latency = sum(self._apply(v) for v in victims)
        self._log("reclaim", {"reason": reason, "frames": int(n_frames), "victims": len(victims)})
        if short is not None:
            raise Insufficient(str(short.args[0]), latency)
        return latency

    def is_referenced(self, grant: AllocationGrant) -> bool:
        for m in self.busy_models:
            if any(g is grant for g in self.weights.layers.get(m, ())):
                return True
        for region in self.activations.values():
            if region.grant is grant and not region.completed:
                return True
        for page in self.kv_pages.values():
            if page.grant is grant:
                seq = self.sequences.get(page.sequence_id)
                if seq is not None and not seq.closed:
                    return True
        return False

    # ----------------------------------------------------------- accounting
    def resident_bytes(self) -> dict[str, int]:
        kv = sum(p.grant.nbytes for p in self.kv_pages.values() if p.grant is not None)
        act = sum(r.grant.nbytes for r in self.activations.values())
        return {"weights": self.weights.bytes(), "kv": kv, "act": act}

    def check_accounting(self) -> None:
        total = sum(self.resident_bytes().values())
        flex = self.mem.count(PageState.FLEXMEM) * PAGE_SIZE
        if total != flex:
            raise InvariantViolation(f"tracked {total} B of secure memory, Flex-Mem holds {flex} B")
        for m, lst in self.weights.layers.items():
            if any(not g.protected for g in lst):
                raise InvariantViolation(f"{m}: resident layer without protection")

    def snapshot(self) -> tuple[int, int, int, int, int]:
        b = self.resident_bytes()
        row = (self.engine.now, b["weights"], b["kv"], b["act"], self.daemon.free_frames())
        self.footprints.append(row)
        return row

    def footprint_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.FOOTPRINT_FIELDS)
        w.writerows(self.footprints)
        return buf.getvalue()
