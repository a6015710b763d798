"""Flex-Monitor: page protection, lazy reclaim, NPU mode switching and
freeze/verify of its own image.

Every method returns the modeled latency of the operation in milliseconds.
"""
from __future__ import annotations

import hashlib
import struct
from enum import Enum

import numpy as np

from .errors import (AlreadyProtected, IntegrityViolation, InvariantViolation, NotLazy,
                     NotPinned, NotProtected, ResourcesHeld, SecurePathHalted,
                     SmmuHookRejected, TaskInFlight)
from .physmem import Access, Actor, Owner, PageState, PhysicalMemory, _as_pages
from .timing import PAGE_SIZE, TimingModel

MON = Actor.MONITOR


class NpuMode(str, Enum):
    UNPROTECTED = "Unprotected"
    PROTECTED = "Protected"


class ReclaimMode(str, Enum):
    EAGER = "Eager"
    LAZY = "Lazy"


DIGEST_ALGORITHM = "sha256"


def _image_bytes(seed: int, label: str, n_pages: int) -> list[bytes]:
    rng = np.random.default_rng([seed, sum(label.encode())])
    return [rng.integers(0, 256, PAGE_SIZE, dtype=np.uint8).tobytes() for _ in range(n_pages)]


def _drop_content(mem, pages: np.ndarray) -> None:
    """Forget the bytes of ``pages``; walks whichever of the two sets is smaller."""
    if len(mem.content) < pages.size:
        hit = np.zeros(mem.total_frames, dtype=bool)
        hit[pages] = True
        for p in [p for p in mem.content if hit[p]]:
            del mem.content[p]
    else:
        for p in pages.tolist():
            mem.content.pop(p, None)


class FlexMonitor:
    def __init__(self, mem: PhysicalMemory, timing: TimingModel | None = None, *,
                 npu_device: str = "npu", seed: int = 0):
        self.mem = mem
        self.timing = timing or TimingModel()
        self.npu_device = npu_device
        self.npu_mode = NpuMode.UNPROTECTED
        self.protection_enabled = True
        self.frozen_hash: bytes | None = None
        self.halted = False
        self.task_in_flight = False
        self._saved_npu_smmu: np.ndarray | None = None

        self.monitor_pages = mem.region_pages("monitor")
        self.driver_pages = np.concatenate([mem.region_pages("driver_code"),
                                            mem.region_pages("driver_data")])
        for p, blob in zip(self.monitor_pages, _image_bytes(seed, "el2", len(self.monitor_pages))):
            mem.content[int(p)] = blob
        for p, blob in zip(self.driver_pages, _image_bytes(seed, "npu-driver", len(self.driver_pages))):
            mem.content[int(p)] = blob

        normal = mem.s2_normal
        mem.unmap_pages(MON, normal, self.monitor_pages)
        # SMMU registers are trapped so every SMMU update goes through us
        if "smmu" in mem.mmio_names:
            mem.unmap_mmio(MON, normal, "smmu")
        mem.fault_handler = self._on_stage2_fault

    # ------------------------------------------------------------ helpers
    def _guard(self):
        if self.halted:
            raise SecurePathHalted("monitor halted after an integrity violation")

    def _log(self, action, payload):
        self.mem._log(MON, action, payload)

    def _non_npu_tables(self):
        return [t for d, t in self.mem.smmu.items() if not (d == self.npu_device and t.flexmem_only)]

    @property
    def npu_table(self):
        return self.mem.smmu[self.npu_device]

    # ---------------------------------------------------------- protection
    def protect_pages(self, pages) -> float:
        """Switch pinned unprotected frames to Flex-Mem."""
        self._guard()
        pages = _as_pages(pages)
        mem = self.mem
        mem.check_pages(pages)
        latency = 0.0
        if pages.size == 0:
            return latency
        if not self.protection_enabled:
            latency += self.unfreeze()
        st = mem.state[pages]
        if (st == PageState.FLEXMEM).any():
            raise AlreadyProtected(f"frame {int(pages[np.argmax(st == PageState.FLEXMEM)])}")
        if (st != PageState.UNPROTECTED).any():
            raise InvariantViolation("only unprotected frames can become Flex-Mem")
        if not mem.pinned[pages].all():
            raise NotPinned(f"frame {int(pages[np.argmin(mem.pinned[pages])])} is not pinned")
        mem.unmap_pages(MON, mem.s2_normal, pages)
        for t in self._non_npu_tables():
            mem.unmap_pages(MON, t, pages)
        mem.set_state(MON, pages, PageState.FLEXMEM)
        if self.npu_table.flexmem_only:
            mem.map_pages(MON, self.npu_table, pages)
        latency += self.timing.flexmem_protect(pages.size * PAGE_SIZE)
        self._log("protect_pages", {"frames": int(pages.size), "latency_ms": latency})
        return latency

    def unprotect_pages(self, pages, mode=ReclaimMode.LAZY) -> float:
        """Return Flex-Mem frames to the normal world, clearing now or on reuse."""
        self._guard()
        mode = ReclaimMode(mode)
        pages = _as_pages(pages)
        mem = self.mem
        mem.check_pages(pages)
        if pages.size == 0:
            return 0.0
        if (mem.state[pages] != PageState.FLEXMEM).any():
            raise NotProtected("unprotect_pages on a frame that is not Flex-Mem")
        if self.npu_table.flexmem_only:
            mem.unmap_pages(MON, self.npu_table, pages)
        if mode is ReclaimMode.EAGER:
            _drop_content(mem, pages)
            mem.dirty[pages] = False
            mem.set_state(MON, pages, PageState.UNPROTECTED)
            mem.map_pages(MON, mem.s2_normal, pages)
        else:
            # stays unmapped; the first normal-world touch goes through on_reuse
            mem.dirty[pages] = True
            mem.set_state(MON, pages, PageState.LAZY_RECLAIM)
        latency = self.timing.flexmem_reclaim(pages.size * PAGE_SIZE, eager=mode is ReclaimMode.EAGER)
        self._log("unprotect_pages", {"frames": int(pages.size), "mode": mode.value,
                                      "latency_ms": latency})
        return latency

    def on_reuse(self, page: int, new_content: bytes | None = None) -> float:
        """Overwrite a lazily reclaimed frame and hand it back to the kernel."""
        mem = self.mem
        mem.check_page(page)
        page = int(page)
        if mem.state[page] != PageState.LAZY_RECLAIM:
            raise NotLazy(f"frame {page} is {PageState(mem.state[page]).name}")
        mem._store(page, new_content)
        mem.dirty[page] = False
        mem.set_state(MON, [page], PageState.UNPROTECTED)
        mem.map_pages(MON, mem.s2_normal, [page])
        self._log("on_reuse", {"page": page, "cleared": new_content is None})
        return self.timing.zero_ms_per_gib * PAGE_SIZE / (1 << 30)

    def reuse_lazy(self, pages) -> float:
        """Bulk :meth:`on_reuse` with no new content: zero and hand back."""
        mem = self.mem
        pages = _as_pages(pages)
        mem.check_pages(pages)
        if pages.size == 0:
            return 0.0
        if (mem.state[pages] != PageState.LAZY_RECLAIM).any():
            raise NotLazy("reuse_lazy on a frame that is not lazily reclaimed")
        _drop_content(mem, pages)
        mem.dirty[pages] = False
        mem.set_state(MON, pages, PageState.UNPROTECTED)
        mem.map_pages(MON, mem.s2_normal, pages)
        self._log("on_reuse", {"frames": int(pages.size), "cleared": True})
        return self.timing.zero_ms_per_gib * pages.size * PAGE_SIZE / (1 << 30)

    def _on_stage2_fault(self, actor, page, kind, data) -> bool:
        if self.mem.state[page] == PageState.LAZY_RECLAIM:
            self.on_reuse(page, data if Access(kind) is Access.WRITE else None)
            return True
        return False

    def scrub_lazy(self) -> int:
        lazy = np.flatnonzero(self.mem.state == PageState.LAZY_RECLAIM)
        self.reuse_lazy(lazy)
        return int(lazy.size)

    # ---------------------------------------------------------------- NPU
    def npu_set_mode(self, target) -> float:
        self._guard()
        target = NpuMode(target)
        if self.task_in_flight:
            raise TaskInFlight("NPU task in flight")
        if target is self.npu_mode:
            return 0.0
        mem = self.mem
        normal, sandbox, npu = mem.s2_normal, mem.s2_sandbox, self.npu_table
        if target is NpuMode.PROTECTED:
            if not self.protection_enabled:
                self.unfreeze()
            mem.unmap_mmio(MON, normal, "npu")
            mem.map_mmio(MON, sandbox, "npu")
            mem.unmap_pages(MON, normal, self.driver_pages)
            mem.map_pages(MON, sandbox, self.driver_pages)
            self._saved_npu_smmu = npu.mapped.copy()
            npu.mapped[:] = False
            npu.flexmem_only = True
            mem.map_pages(MON, npu, np.flatnonzero(mem.state == PageState.FLEXMEM))
        else:
            npu.mapped[:] = False
            npu.flexmem_only = False
            if self._saved_npu_smmu is not None:
                restore = self._saved_npu_smmu & (mem.state == PageState.UNPROTECTED)
                mem.map_pages(MON, npu, np.flatnonzero(restore))
            self._saved_npu_smmu = None
            mem.unmap_pages(MON, sandbox, self.driver_pages)
            mem.map_pages(MON, normal, self.driver_pages)
            mem.unmap_mmio(MON, sandbox, "npu")
            mem.map_mmio(MON, normal, "npu")
        self.npu_mode = target
        self._log("npu_set_mode", {"mode": target.value})
        self.check_invariants(full=False)
        return self.timing.npu_mode_switch_ms

    # ------------------------------------------------------- kernel hooks
    def kernel_smmu_update(self, device: str, pages, *, map: bool = True) -> None:
        """A trapped kernel write to an SMMU table."""
        mem = self.mem
        table = mem.smmu[device]
        pages = _as_pages(pages)
        mem.check_pages(pages)
        if not self.protection_enabled:
            # frozen: the trap is off and the kernel edits the table directly
            table.mapped[pages] = map
            return
        if table.flexmem_only:
            raise SmmuHookRejected(f"{device} SMMU is owned by the secure world")
        if map:
            bad = (mem.state[pages] != PageState.UNPROTECTED) | (mem.owner[pages] == Owner.RESERVED)
            if bad.any():
                raise SmmuHookRejected(f"frame {int(pages[np.argmax(bad)])} may not be DMA-mapped")
            mem.map_pages(MON, table, pages)
        else:
            mem.unmap_pages(MON, table, pages)

    def _sanitize_smmu(self):
        mem = self.mem
        bad = (mem.state != PageState.UNPROTECTED) | (mem.owner == Owner.RESERVED)
        for t in self._non_npu_tables():
            t.mapped &= ~bad

    # ------------------------------------------------- on-demand protection
    def digest(self) -> bytes:
        h = hashlib.sha256()
        for p in self.monitor_pages.tolist():
            h.update(self.mem.read_raw(p))
        h.update(self.mem.s2_normal.canonical_bytes())
        h.update(self.mem.s2_sandbox.canonical_bytes())
        return h.digest()

    def freeze(self) -> float:
        """Hash the EL2 image and drop stage-2 translation."""
        self._guard()
        if not self.protection_enabled:
            return 0.0
        if self.mem.count(PageState.FLEXMEM) or self.npu_mode is NpuMode.PROTECTED:
            raise ResourcesHeld("Flex-Mem or Flex-NPU still held")
        # stage 2 is about to go away, so lazy frames cannot stay hidden behind it
        scrubbed = self.scrub_lazy()
        self.frozen_hash = self.digest()
        self.protection_enabled = False
        self.mem.translation_enabled = False
        self._log("freeze", {"scrubbed_lazy": scrubbed})
        return self.timing.hash_check_ms

    def unfreeze(self) -> float:
        """Restore stage 2 and verify the image against the frozen digest."""
        self._guard()
        if self.protection_enabled:
            return 0.0
        self.mem.translation_enabled = True
        if self.digest() != self.frozen_hash:
            self.halted = True
            self._log("integrity_violation", {})
            raise IntegrityViolation("EL2 image changed while frozen")
        self.frozen_hash = None
        self.protection_enabled = True
        self._sanitize_smmu()
        self._log("unfreeze", {})
        return self.timing.s2pt_boot_ms + self.timing.hash_check_ms

    # ---------------------------------------------------------- checking
    def check_invariants(self, full: bool = True) -> None:
        mem = self.mem
        if full:
            mem.check_invariants()
        in_normal = "npu" in mem.s2_normal.mmio_mapped
        in_sandbox = "npu" in mem.s2_sandbox.mmio_mapped
        if in_normal == in_sandbox:
            raise InvariantViolation("NPU MMIO must be mapped in exactly one stage-2 table")
        if in_sandbox != (self.npu_mode is NpuMode.PROTECTED):
            raise InvariantViolation("sandbox maps NPU MMIO iff NPU is protected")
        if self.npu_mode is NpuMode.PROTECTED:
            if mem.s2_normal.mapped[self.driver_pages].any():
                raise InvariantViolation("protected NPU driver visible to the kernel")
        if not self.protection_enabled:
            if full and mem.count(PageState.FLEXMEM):
                raise InvariantViolation("Flex-Mem frames exist while protection is off")
            if self.npu_mode is not NpuMode.UNPROTECTED:
                raise InvariantViolation("NPU protected while protection is off")
        if (self.frozen_hash is None) != self.protection_enabled:
            raise InvariantViolation("frozen hash present iff protection is off")
        if full and np.any(np.diff(self.monitor_pages) != 1):
            raise InvariantViolation("monitor region must be contiguous")


class NpuDevice:
    """Minimal NPU command interface behind the NPU MMIO region.

    A write of ``<src:u64><dst:u64>`` makes the NPU copy frame ``src`` to frame
    ``dst`` by DMA, subject to its SMMU table.
    """

    def __init__(self, mem: PhysicalMemory, device: str = "npu"):
        self.mem = mem
        self.device = device
        self.completed: list[tuple[int, int, bool]] = []
        mem.mmio_handlers["npu"] = self._on_write

    @staticmethod
    def copy_command(src: int, dst: int) -> bytes:
        return struct.pack("<QQ", src, dst)

    def _on_write(self, actor, offset, data):
        if not data or len(data) < 16:
            return
        src, dst = struct.unpack_from("<QQ", data)
        if not (0 <= src < self.mem.total_frames and 0 <= dst < self.mem.total_frames):
            return
        got = self.mem.dma_access(self.device, src, Access.READ)
        ok = got.ok and self.mem.dma_access(self.device, dst, Access.WRITE, got.data).ok
        self.completed.append((src, dst, ok))
