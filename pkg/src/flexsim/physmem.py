"""Physical page frames, stage-2 tables and SMMU tables.

Every CPU or DMA access in the simulator is checked here.  Stage-1 (VA to
IPA) translation is not modeled: the normal-world kernel addresses frames
directly, minus whatever the stage-2 table leaves unmapped.

Per-frame bookkeeping lives in numpy arrays so that multi-GiB memories
(millions of frames) stay cheap; page contents are stored sparsely as
immutable ``bytes`` and unwritten frames read as zeros.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Callable, Iterable

import numpy as np

from .errors import InvalidPage, InvariantViolation, NotMonitor, UnknownDevice
from .timing import PAGE_SIZE, Engine

ZERO_PAGE = bytes(PAGE_SIZE)


class PageState(IntEnum):
    UNPROTECTED = 0
    FLEXMEM = 1
    TZ_SECURE = 2
    LAZY_RECLAIM = 3


class Owner(IntEnum):
    """Who holds a frame from the kernel allocator's point of view."""

    FREE = 0
    KERNEL = 1      # background applications, movable
    DAEMON = 2      # pinned by the Flex-Mem daemon
    RESERVED = 3    # TrustZone partition, MMIO, monitor image, NPU driver
    CMA = 4         # carved out as a contiguous secure region


class Actor(str, Enum):
    NORMAL_KERNEL = "NormalKernel"
    NORMAL_APP = "NormalApp"
    SECURE_WORLD = "SecureWorld"
    MONITOR = "Monitor"


NORMAL_ACTORS = frozenset({Actor.NORMAL_KERNEL, Actor.NORMAL_APP})


class Access(str, Enum):
    READ = "Read"
    WRITE = "Write"


class Outcome(str, Enum):
    OK = "Ok"
    STAGE2_FAULT = "Stage2Fault"
    TZ_FAULT = "TzFault"
    SMMU_FAULT = "SmmuFault"


@dataclass(frozen=True)
class AccessOutcome:
    status: Outcome
    data: bytes | None = None

    @property
    def ok(self) -> bool:
        return self.status is Outcome.OK


@dataclass
class MemoryLayout:
    """Static frame layout; everything after the reserved ranges is general."""

    total_frames: int
    tz_frames: int = 64
    mmio: dict[str, int] = field(default_factory=lambda: {"npu": 16, "smmu": 1})
    monitor_frames: int = 4
    driver_code_frames: int = 4
    driver_data_frames: int = 4
    devices: tuple[str, ...] = ("disk", "npu")

    def __post_init__(self):
        if self.total_frames < self.reserved_frames:
            raise ValueError("layout reserves more frames than exist")
        if "npu" not in self.mmio or "npu" not in self.devices:
            raise ValueError("layout needs an NPU MMIO region and SMMU table")

    @property
    def reserved_frames(self) -> int:
        return (self.tz_frames + sum(self.mmio.values()) + self.monitor_frames
                + self.driver_code_frames + self.driver_data_frames)

    def ranges(self) -> dict[str, range]:
        out: dict[str, range] = {}
        pos = 0

        def take(name, n):
            nonlocal pos
            out[name] = range(pos, pos + n)
            pos += n

        take("tz", self.tz_frames)
        for name in sorted(self.mmio):
            take(f"mmio:{name}", self.mmio[name])
        take("monitor", self.monitor_frames)
        take("driver_code", self.driver_code_frames)
        take("driver_data", self.driver_data_frames)
        take("general", self.total_frames - pos)
        return out


class Stage2Table:
    def __init__(self, owner: str, total_frames: int):
        self.owner = owner
        self.mapped = np.zeros(total_frames, dtype=np.bool_)
        self.mmio_mapped: set[str] = set()

    def canonical_bytes(self) -> bytes:
        idx = np.flatnonzero(self.mapped).astype("<u8")
        mmio = ",".join(sorted(self.mmio_mapped)).encode()
        return b"S2PT|" + self.owner.encode() + b"|" + mmio + b"|" + idx.tobytes()


class SmmuTable:
    def __init__(self, device: str, total_frames: int):
        self.device = device
        self.mapped = np.zeros(total_frames, dtype=np.bool_)
        # set by the monitor while the NPU runs protected
        self.flexmem_only = False


def _as_pages(pages) -> np.ndarray:
    if isinstance(pages, np.ndarray):
        return pages.astype(np.int64, copy=False).ravel()
    if isinstance(pages, (int, np.integer)):
        return np.array([pages], dtype=np.int64)
    return np.fromiter((int(p) for p in pages), dtype=np.int64)


class PhysicalMemory:
    """Frame array plus the translation structures that gate every access."""

    def __init__(self, layout: MemoryLayout, engine: Engine | None = None):
        self.layout = layout
        self.total_frames = n = layout.total_frames
        self.engine = engine if engine is not None else Engine()
        self.logging = True
        self.ranges = layout.ranges()

        self.state = np.zeros(n, dtype=np.uint8)
        self.owner = np.zeros(n, dtype=np.uint8)
        self.pinned = np.zeros(n, dtype=np.bool_)
        self.dirty = np.zeros(n, dtype=np.bool_)
        self.content: dict[int, bytes] = {}

        self.mmio_names = sorted(layout.mmio)
        self.mmio_of = np.full(n, -1, dtype=np.int16)
        for i, name in enumerate(self.mmio_names):
            r = self.ranges[f"mmio:{name}"]
            self.mmio_of[r.start:r.stop] = i

        tz = self.ranges["tz"]
        self.tz_range = tz
        self.state[tz.start:tz.stop] = PageState.TZ_SECURE
        general = self.ranges["general"]
        self.owner[:general.start] = Owner.RESERVED
        self.general = general

        self.s2 = {
            "NormalKernel": Stage2Table("NormalKernel", n),
            "NpuSandbox": Stage2Table("NpuSandbox", n),
        }
        normal = self.s2["NormalKernel"]
        normal.mapped[:] = True
        normal.mapped[tz.start:tz.stop] = False
        normal.mmio_mapped = set(self.mmio_names)
        self.smmu = {d: SmmuTable(d, n) for d in layout.devices}

        # stage-2 translation on/off (off while the monitor is frozen)
        self.translation_enabled = True
        # called on a normal-world stage-2 miss; may resolve it (lazy reuse)
        self.fault_handler: Callable[[Actor, int, Access, bytes | None], bool] | None = None
        # device models behind MMIO regions, keyed by region name
        self.mmio_handlers: dict[str, Callable[[Actor, int, bytes | None], None]] = {}

    # ------------------------------------------------------------------ utils
    @property
    def s2_normal(self) -> Stage2Table:
        return self.s2["NormalKernel"]

    @property
    def s2_sandbox(self) -> Stage2Table:
        return self.s2["NpuSandbox"]

    def _log(self, actor, action, payload):
        if self.logging:
            self.engine.record(str(getattr(actor, "value", actor)), action, payload)

    def check_page(self, page: int):
        if not (0 <= int(page) < self.total_frames):
            raise InvalidPage(f"frame {page} outside 0..{self.total_frames - 1}")

    def check_pages(self, pages: np.ndarray):
        if pages.size and (pages.min() < 0 or pages.max() >= self.total_frames):
            raise InvalidPage(f"frames outside 0..{self.total_frames - 1}")

    def mmio_region(self, page: int) -> str | None:
        i = self.mmio_of[page]
        return None if i < 0 else self.mmio_names[i]

    def region_pages(self, name: str) -> np.ndarray:
        r = self.ranges[name]
        return np.arange(r.start, r.stop, dtype=np.int64)

    def read_raw(self, page: int) -> bytes:
        return self.content.get(int(page), ZERO_PAGE)

    def count(self, state: PageState) -> int:
        return int(np.count_nonzero(self.state == state))

    # ---------------------------------------------------------------- access
    def cpu_access(self, actor, page: int, kind, data: bytes | None = None) -> AccessOutcome:
        """A CPU load/store by ``actor``; normal actors are gated by stage 2."""
        self.check_page(page)
        actor, kind, page = Actor(actor), Access(kind), int(page)
        if actor in NORMAL_ACTORS:
            verdict = self._normal_gate(actor, page, kind, data)
            if verdict is not None:
                self._log(actor, "cpu_access", {"page": page, "kind": kind.value,
                                                "outcome": verdict.value})
                return AccessOutcome(verdict)
        out = self._perform(actor, page, kind, data)
        self._log(actor, "cpu_access", {"page": page, "kind": kind.value, "outcome": "Ok"})
        return out

    def _normal_gate(self, actor, page, kind, data) -> Outcome | None:
        if self.state[page] == PageState.TZ_SECURE:
            return Outcome.TZ_FAULT
        if not self.translation_enabled:
            return None
        region = self.mmio_region(page)
        if region is not None:
            return None if region in self.s2_normal.mmio_mapped else Outcome.STAGE2_FAULT
        if not self.s2_normal.mapped[page] and self.fault_handler is not None:
            self.fault_handler(actor, page, kind, data)
        if not self.s2_normal.mapped[page]:
            return Outcome.STAGE2_FAULT
        if self.state[page] != PageState.UNPROTECTED:
            # unreachable while the table invariants hold
            raise InvariantViolation(f"frame {page} mapped while {PageState(self.state[page]).name}")
        return None

    def _perform(self, actor, page, kind, data) -> AccessOutcome:
        region = self.mmio_region(page)
        if region is not None:
            handler = self.mmio_handlers.get(region)
            if kind is Access.WRITE and handler is not None:
                handler(actor, page - self.ranges[f"mmio:{region}"].start, data)
            return AccessOutcome(Outcome.OK, ZERO_PAGE if kind is Access.READ else None)
        if kind is Access.READ:
            return AccessOutcome(Outcome.OK, self.read_raw(page))
        self._store(page, data)
        return AccessOutcome(Outcome.OK)

    def _store(self, page: int, data: bytes | None):
        if data is None or not any(data):
            self.content.pop(page, None)
            return
        if len(data) > PAGE_SIZE:
            raise ValueError("write larger than a page")
        if len(data) < PAGE_SIZE:
            data = bytes(data) + bytes(PAGE_SIZE - len(data))
        self.content[page] = bytes(data)

    def dma_access(self, device: str, page: int, kind, data: bytes | None = None) -> AccessOutcome:
        """A device DMA, translated and checked by the device's SMMU table."""
        table = self.smmu.get(device)
        if table is None:
            raise UnknownDevice(device)
        self.check_page(page)
        page, kind = int(page), Access(kind)
        if not table.mapped[page] or self.state[page] == PageState.TZ_SECURE:
            self._log(f"dma:{device}", "dma_access", {"page": page, "kind": kind.value,
                                                      "outcome": "SmmuFault"})
            return AccessOutcome(Outcome.SMMU_FAULT)
        self._log(f"dma:{device}", "dma_access", {"page": page, "kind": kind.value, "outcome": "Ok"})
        if kind is Access.READ:
            return AccessOutcome(Outcome.OK, self.read_raw(page))
        self._store(page, data)
        return AccessOutcome(Outcome.OK)

    def secure_write(self, pages, blob: bytes) -> None:
        """Secure-world bulk store of ``blob`` across ``pages`` (one log record)."""
        pages = _as_pages(pages)
        self.check_pages(pages)
        if len(blob) > pages.size * PAGE_SIZE:
            raise ValueError("blob larger than the page run")
        for i, p in enumerate(pages.tolist()):
            self._store(p, blob[i * PAGE_SIZE:(i + 1) * PAGE_SIZE])
        self._log(Actor.SECURE_WORLD, "secure_write", {"frames": int(pages.size), "bytes": len(blob)})

    def secure_read(self, pages, nbytes: int | None = None) -> bytes:
        pages = _as_pages(pages)
        self.check_pages(pages)
        data = b"".join(self.read_raw(p) for p in pages.tolist())
        return data if nbytes is None else data[:nbytes]

    # ------------------------------------------------------------- mutation
    @staticmethod
    def _require_monitor(actor):
        if Actor(actor) is not Actor.MONITOR:
            raise NotMonitor(f"{Actor(actor).value} may not edit translation tables")

    def _forbidden_in(self, table, pages: np.ndarray) -> np.ndarray:
        st = self.state[pages]
        if isinstance(table, Stage2Table):
            if table.owner == "NormalKernel":
                return st != PageState.UNPROTECTED
            return np.zeros(pages.size, dtype=np.bool_)
        if table.flexmem_only:
            return st != PageState.FLEXMEM
        return st != PageState.UNPROTECTED

    def map_pages(self, actor, table, pages) -> None:
        self._require_monitor(actor)
        pages = _as_pages(pages)
        self.check_pages(pages)
        bad = self._forbidden_in(table, pages)
        if bad.any():
            p = int(pages[np.argmax(bad)])
            name = getattr(table, "owner", None) or f"smmu:{table.device}"
            raise InvariantViolation(
                f"mapping frame {p} ({PageState(self.state[p]).name}) into {name} is forbidden")
        table.mapped[pages] = True

    def unmap_pages(self, actor, table, pages) -> None:
        self._require_monitor(actor)
        pages = _as_pages(pages)
        self.check_pages(pages)
        table.mapped[pages] = False

    def map_mmio(self, actor, table: Stage2Table, region: str) -> None:
        self._require_monitor(actor)
        if region not in self.mmio_names:
            raise InvalidPage(f"unknown MMIO region {region!r}")
        table.mmio_mapped.add(region)

    def unmap_mmio(self, actor, table: Stage2Table, region: str) -> None:
        self._require_monitor(actor)
        table.mmio_mapped.discard(region)

    def set_state(self, actor, pages, state: PageState) -> None:
        """Monitor-only state transition, re-checked against every table."""
        self._require_monitor(actor)
        pages = _as_pages(pages)
        self.check_pages(pages)
        old = self.state[pages].copy()
        self.state[pages] = state
        try:
            self.check_invariants(pages)
        except InvariantViolation:
            self.state[pages] = old
            raise

    # ------------------------------------------------------------ invariants
    def check_invariants(self, pages: np.ndarray | None = None) -> None:
        """Raise InvariantViolation if any table maps a forbidden frame."""
        sel = slice(None) if pages is None else pages
        st = self.state[sel]
        normal = self.s2_normal.mapped[sel]
        if (normal & (st != PageState.UNPROTECTED)).any():
            raise InvariantViolation("normal-world stage-2 maps a protected frame")
        for dev, table in self.smmu.items():
            m = table.mapped[sel]
            if table.flexmem_only:
                if (m & (st != PageState.FLEXMEM)).any():
                    raise InvariantViolation(f"protected {dev} SMMU maps a non-Flex-Mem frame")
            elif (m & (st != PageState.UNPROTECTED)).any():
                raise InvariantViolation(f"{dev} SMMU maps a protected frame")
        if pages is None:
            tz = np.flatnonzero(self.state == PageState.TZ_SECURE)
            cma = np.flatnonzero(self.owner == Owner.CMA)
            static = np.arange(self.tz_range.start, self.tz_range.stop)
            if not np.array_equal(np.setdiff1d(tz, cma), static):
                raise InvariantViolation("TrustZone partition is not the static range")

    # ------------------------------------------------------------ snapshots
    def partition_counts(self) -> dict[str, int]:
        """Frame counts by accounting category (they sum to total_frames)."""
        st, ow = self.state, self.owner
        return {
            "granted": int(np.count_nonzero((ow == Owner.DAEMON))),
            "kernel_free": int(np.count_nonzero((ow == Owner.FREE) & (st == PageState.UNPROTECTED))),
            "lazy_reclaim": int(np.count_nonzero(st == PageState.LAZY_RECLAIM)),
            "tz_secure": int(np.count_nonzero(st == PageState.TZ_SECURE)),
            "kernel_used": int(np.count_nonzero(ow == Owner.KERNEL)),
            "reserved": int(np.count_nonzero((ow == Owner.RESERVED) & (st != PageState.TZ_SECURE))),
        }

    def free_mask(self) -> np.ndarray:
        """Frames the kernel allocator may hand out (free or lazily reclaimed)."""
        return self.owner == Owner.FREE
