"""Normal-world Flex-Mem daemon and the CMA baseline allocator.

The daemon pins frames from the kernel allocator and hands them to the
monitor; frames need not be contiguous.  The CMA path carves one contiguous
secure run, compacting (migrating) background pages out of the way.
"""
from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import Insufficient, OutOfMemory, ResourcesHeld, Unsatisfiable
from .monitor import FlexMonitor, ReclaimMode
from .physmem import Actor, Owner, PageState, PhysicalMemory
from .timing import GIB, PAGE_SIZE, TimingModel

MON = Actor.MONITOR


def frames_for(nbytes: int) -> int:
    return -(-int(nbytes) // PAGE_SIZE)


@dataclass(eq=False)
class AllocationGrant:
    pages: np.ndarray
    grant_id: int
    label: str = ""
    pinned: bool = True
    protected: bool = False
    latency_ms: float = 0.0

    @property
    def frames(self) -> int:
        return int(self.pages.size)

    @property
    def nbytes(self) -> int:
        return self.frames * PAGE_SIZE


@dataclass(eq=False)
class CmaRegion:
    base: int
    length: int
    latency_ms: float = 0.0
    migrated: int = 0

    @property
    def pages(self) -> np.ndarray:
        return np.arange(self.base, self.base + self.length, dtype=np.int64)


@dataclass
class AllocationRecord:
    grant_id: int
    frames: int
    mode: str
    latency_ms: float


class FlexMemDaemon:
    CSV_FIELDS = ("grant_id", "frames", "mode", "latency_ms")

    def __init__(self, mem: PhysicalMemory, monitor: FlexMonitor, timing: TimingModel | None = None):
        self.mem = mem
        self.monitor = monitor
        self.timing = timing or monitor.timing
        self.grants: dict[int, AllocationGrant] = {}
        self.records: list[AllocationRecord] = []
        self.cma_regions: list[CmaRegion] = []
        # the secure-world framework deciding reclaim victims (memmgr)
        self.framework = None
        self._ids = itertools.count(1)
        self._hint = mem.general.start

    # --------------------------------------------------------- bookkeeping
    def free_frames(self) -> int:
        return int(np.count_nonzero(self.mem.owner == Owner.FREE))

    def _record(self, gid, frames, mode, latency):
        self.records.append(AllocationRecord(gid, int(frames), mode, float(latency)))

    def records_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_FIELDS)
        for r in self.records:
            w.writerow((r.grant_id, r.frames, r.mode, f"{r.latency_ms:.6f}"))
        return buf.getvalue()

    def occupy_background(self, n_frames: int, rng: np.random.Generator) -> np.ndarray:
        """Scatter ``n_frames`` of background (movable) usage over free frames."""
        free = np.flatnonzero(self.mem.owner == Owner.FREE)
        if n_frames > free.size:
            raise OutOfMemory("background usage exceeds memory")
        pick = np.sort(rng.choice(free, size=int(n_frames), replace=False))
        self.mem.owner[pick] = Owner.KERNEL
        return pick

    def _swap_out(self, n_frames: int) -> float:
        """Make room by swapping background pages; returns the penalty."""
        victims = np.flatnonzero(self.mem.owner == Owner.KERNEL)[::-1][:n_frames]
        if victims.size < n_frames:
            raise OutOfMemory(f"need {n_frames} more frames, only {victims.size} swappable")
        for p in victims.tolist():
            self.mem.content.pop(p, None)
        self.mem.owner[victims] = Owner.FREE
        self._hint = min(self._hint, int(victims.min()))
        return self.timing.swap(n_frames * PAGE_SIZE)

    def _make_room(self, n_frames: int) -> float:
        short = n_frames - self.free_frames()
        latency = 0.0
        if short > 0 and self.framework is not None:
            try:
                latency += self.framework.reclaim(short, reason="allocation")
            except Insufficient:
                pass
            short = n_frames - self.free_frames()
        if short > 0:
            latency += self._swap_out(short)
        return latency

    def _take(self, n_frames: int) -> np.ndarray:
        pages = kernels.take_lowest_free(self.mem.owner, n_frames, self._hint, Owner.FREE)
        if pages.size < n_frames:
            pages = kernels.take_lowest_free(self.mem.owner, n_frames, 0, Owner.FREE)
        if pages.size < n_frames:
            raise OutOfMemory(f"{n_frames} frames requested, {pages.size} free")
        self._hint = int(pages[-1]) + 1 if pages.size else self._hint
        self.monitor.reuse_lazy(pages[self.mem.state[pages] == PageState.LAZY_RECLAIM])
        return pages

    # ----------------------------------------------------------- Flex-Mem
    def allocate_pinned(self, n_frames: int, label: str = "") -> AllocationGrant:
        """mmap-and-pin frames for a later protect (secure loading path)."""
        n_frames = int(n_frames)
        latency = self._make_room(n_frames) if n_frames else 0.0
        pages = self._take(n_frames) if n_frames else np.zeros(0, dtype=np.int64)
        self.mem.owner[pages] = Owner.DAEMON
        self.mem.pinned[pages] = True
        latency += self.timing.mmap(n_frames * PAGE_SIZE)
        g = AllocationGrant(pages, next(self._ids), label, latency_ms=latency)
        self.grants[g.grant_id] = g
        self._record(g.grant_id, n_frames, "pinned", latency)
        return g

    def protect(self, grant: AllocationGrant) -> float:
        latency = self.monitor.protect_pages(grant.pages)
        grant.protected = True
        grant.latency_ms += latency
        self._record(grant.grant_id, grant.frames, "protect", latency)
        return latency

    def flexmem_allocate(self, n_frames: int, label: str = "") -> AllocationGrant:
        """Allocate, pin and protect ``n_frames`` (any fragmentation)."""
        g = self.allocate_pinned(n_frames, label)
        if g.frames:
            self.protect(g)
        return g

    def release(self, grant: AllocationGrant, mode=ReclaimMode.LAZY, *, voluntary: bool = True) -> float:
        """Hand a grant back: unprotect, unpin, return to the kernel free list."""
        if voluntary and self.framework is not None and self.framework.is_referenced(grant):
            raise ResourcesHeld(f"grant {grant.grant_id} is used by a live inference task")
        if grant.grant_id not in self.grants:
            raise KeyError(f"unknown grant {grant.grant_id}")
        latency = 0.0
        if grant.protected and grant.frames:
            latency = self.monitor.unprotect_pages(grant.pages, mode)
        mem = self.mem
        mem.pinned[grant.pages] = False
        mem.owner[grant.pages] = Owner.FREE
        if grant.pages.size:
            self._hint = min(self._hint, int(grant.pages.min()))
        grant.pinned = False
        grant.protected = False
        del self.grants[grant.grant_id]
        self._record(grant.grant_id, grant.frames, f"release-{ReclaimMode(mode).value.lower()}", latency)
        return latency

    def kernel_reclaim(self, n_frames: int) -> float:
        """Kernel-initiated reclaim of ``n_frames`` (best effort)."""
        if n_frames <= 0:
            return 0.0
        if self.framework is not None:
            try:
                return self.framework.reclaim(n_frames, reason="kernel")
            except Insufficient as exc:
                return exc.args[1] if len(exc.args) > 1 else 0.0
        latency, got = 0.0, 0
        for g in sorted(self.grants.values(), key=lambda g: -g.grant_id):
            if got >= n_frames:
                break
            got += g.frames
            latency += self.release(g, ReclaimMode.LAZY, voluntary=False)
        return latency

    # ---------------------------------------------------------------- mmap
    def mmap_allocate(self, n_frames: int) -> tuple[np.ndarray, float]:
        """Plain normal-world allocation (no contiguity, no protection)."""
        latency = self._make_room(n_frames) if n_frames else 0.0
        pages = self._take(n_frames)
        self.mem.owner[pages] = Owner.KERNEL
        latency += self.timing.mmap(n_frames * PAGE_SIZE)
        self._record(0, n_frames, "mmap", latency)
        return pages, latency

    # ----------------------------------------------------------------- CMA
    def cma_allocate(self, n_frames: int, background_pressure: float) -> CmaRegion:
        """Carve a contiguous secure run; latency follows the calibrated curve."""
        mem = self.mem
        n_frames = int(n_frames)
        latency = 0.0
        if n_frames == 0:
            return CmaRegion(mem.general.start, 0, 0.0)
        short = n_frames - self.free_frames()
        if short > 0:
            latency += self._swap_out(short)
        movable = mem.owner == Owner.KERNEL
        immovable = ~(movable | (mem.owner == Owner.FREE))
        base, cost = kernels.best_contiguous_window(immovable, movable, n_frames)
        if base < 0:
            raise Unsatisfiable(f"no compactable run of {n_frames} frames")
        window = np.arange(base, base + n_frames, dtype=np.int64)
        to_move = window[movable[window]]
        if to_move.size:
            outside = mem.owner == Owner.FREE
            outside[base:base + n_frames] = False
            dest = kernels.take_lowest_free(outside, to_move.size, 0, True)
            if dest.size < to_move.size:
                raise Unsatisfiable("not enough free frames to migrate into")
            for s, d in zip(to_move.tolist(), dest.tolist()):
                blob = mem.content.pop(s, None)
                if blob is not None:
                    mem.content[d] = blob
            mem.owner[dest] = Owner.KERNEL
        self.monitor.reuse_lazy(window[mem.state[window] == PageState.LAZY_RECLAIM])
        mem.owner[window] = Owner.CMA
        mem.unmap_pages(MON, mem.s2_normal, window)
        for t in mem.smmu.values():
            mem.unmap_pages(MON, t, window)
        mem.set_state(MON, window, PageState.TZ_SECURE)
        latency += self.timing.cma_alloc(n_frames * PAGE_SIZE, background_pressure)
        region = CmaRegion(base, n_frames, latency, int(to_move.size))
        self.cma_regions.append(region)
        self._record(-len(self.cma_regions), n_frames, "cma", latency)
        return region

    def cma_release(self, region: CmaRegion) -> float:
        mem = self.mem
        w = region.pages
        for p in w.tolist():
            mem.content.pop(p, None)
        mem.set_state(MON, w, PageState.UNPROTECTED)
        mem.map_pages(MON, mem.s2_normal, w)
        mem.owner[w] = Owner.FREE
        self._hint = min(self._hint, region.base)
        self.cma_regions.remove(region)
        latency = self.timing.cma_reclaim(region.length * PAGE_SIZE)
        self._record(0, region.length, "cma-release", latency)
        return latency


def gib_frames(gib: float) -> int:
    return int(round(gib * GIB / PAGE_SIZE))
