"""Adversary campaigns against a small live device.

The adversary controls the normal-world kernel: it reads and writes frames,
issues DMA, asks (through the trapped SMMU hook) for DMA mappings, pokes the
NPU command registers, flips bits in the monitor image and replays captured
requests.  The secure world meanwhile performs its own benign steps
(allocating, releasing, switching the NPU, freezing).  Exploration is
either an exhaustive breadth-first search to a fixed depth, deduplicating
states and collapsing symmetric frames, or a batch of random traces.

A finding is any of:

* ``plaintext``: sentinel or key bytes returned to a normal actor, or left
  on a frame the normal world (CPU or DMA) can currently read;
* ``integrity``: a normal-world write landed on a protected frame;
* ``tamper``: the monitor image differs from the booted one while the
  secure path is live, or a frozen tamper would pass verification;
* ``invariant``: a mapping invariant check failed;
* ``replay``: a replayed request was accepted.
"""
from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np

from ..errors import IntegrityViolation, ReplayDetected, SimulationError
from ..monitor import NpuDevice, NpuMode, ReclaimMode
from ..physmem import Access, Actor, MemoryLayout, PageState
from ..sealing import derive_key
from ..session import ClientSession, Vendor, open_session, secure_boot_load, sha256
from ..system import System
from ..timing import PAGE_SIZE

ADVERSARY_ACTIONS = ("kernel_read", "kernel_write", "dma_read", "dma_write", "smmu_reconfig",
                     "npu_mmio_poke", "tamper_monitor", "replay_request")
SECURE_ACTIONS = ("alloc_sentinel", "release_lazy", "release_eager", "npu_protect",
                  "npu_unprotect", "freeze", "unfreeze")
ATTACKER_FILL = b"\xa5" * PAGE_SIZE


def small_layout(total_frames: int = 16) -> MemoryLayout:
    """16 frames: 2 TZ, NPU and SMMU MMIO, a 4-frame monitor, 1+1 driver, 6 general."""
    return MemoryLayout(total_frames=total_frames, tz_frames=2, mmio={"npu": 1, "smmu": 1},
                        monitor_frames=4, driver_code_frames=1, driver_data_frames=1)


@dataclass(frozen=True)
class AttackCampaign:
    exploration: str = "exhaustive"        # or "randomized"
    depth: int = 4
    n_traces: int = 1000
    total_frames: int = 16
    actions: tuple[str, ...] = ADVERSARY_ACTIONS
    secure_actions: tuple[str, ...] = SECURE_ACTIONS
    seed: int = 0

    def __post_init__(self):
        unknown = set(self.actions) - set(ADVERSARY_ACTIONS)
        if unknown:
            raise ValueError(f"not a normal-world capability: {sorted(unknown)}")
        if set(self.secure_actions) - set(SECURE_ACTIONS):
            raise ValueError("unknown secure-world step")
        if self.exploration not in ("exhaustive", "randomized"):
            raise ValueError(f"unknown exploration {self.exploration!r}")


@dataclass(frozen=True)
class Finding:
    kind: str
    trace: tuple
    detail: str


@dataclass
class SecurityReport:
    exploration: str
    depth: int
    states: int = 0
    transitions: int = 0
    traces: int = 0
    findings: list[Finding] = field(default_factory=list)
    tamper_attempts: int = 0
    tamper_detected: int = 0
    replay_attempts: int = 0
    replay_detected: int = 0

    @property
    def plaintext_observations(self) -> int:
        return sum(f.kind == "plaintext" for f in self.findings)

    @property
    def undetected_tampering(self) -> int:
        return sum(f.kind == "tamper" for f in self.findings)

    @property
    def clean(self) -> bool:
        return not self.findings

    def summary(self) -> dict:
        kinds = sorted({f.kind for f in self.findings})
        return {"exploration": self.exploration, "depth": self.depth, "states": self.states,
                "transitions": self.transitions, "traces": self.traces,
                "findings": len(self.findings),
                **{f"findings_{k}": sum(f.kind == k for f in self.findings) for k in kinds},
                "tamper_attempts": self.tamper_attempts, "tamper_detected": self.tamper_detected,
                "replay_attempts": self.replay_attempts, "replay_detected": self.replay_detected}


class _Shared:
    """Session state outside the copied world (replays never change it on success paths)."""

    def __init__(self, seed: int):
        vendor = Vendor(seed)
        binary, sig = vendor.package(b"flexserve-ta\0" * 64)
        self.framework = secure_boot_load(binary, sig, vendor.provision(), None, seed=seed)
        client = open_session(self.framework, ClientSession(vendor.device_public_key, sha256(binary),
                                                            seed=seed))
        self.captured = client.seal_request(b"what is on my calendar", 0)
        self.framework.invoke(self.captured)


class World:
    """A live small device with secrets in Flex-Mem and TZ frames."""

    def __init__(self, seed: int = 0, total_frames: int = 16):
        self.seed = seed
        s = self.system = System.build(layout=small_layout(total_frames), frozen=False,
                                       seed=seed, logging=False)
        s.memmgr = None
        s.daemon.framework = None
        self.sentinel = derive_key(seed, "attack-sentinel") * (PAGE_SIZE // 32)
        self.key_bytes = derive_key(seed, "attack-tz-key")
        tz = s.mem.tz_range
        s.mem.secure_write([tz.start], self.key_bytes)
        self.monitor_image = b"".join(s.mem.read_raw(p) for p in s.monitor.monitor_pages.tolist())
        # a background application frame with ordinary data
        bg = s.daemon.occupy_background(1, np.random.default_rng(seed))
        s.mem.content[int(bg[0])] = b"\x11" * PAGE_SIZE
        self.secret_grants: list[int] = []
        self._alloc_sentinel()
        self.tamper_pending = False

    # -- secure-world steps -----------------------------------------------------
    def _alloc_sentinel(self):
        g = self.system.daemon.flexmem_allocate(1, label="sentinel")
        self.system.mem.secure_write(g.pages, self.sentinel)
        self.secret_grants.append(g.grant_id)

    def secure_step(self, name: str):
        s = self.system
        mon, daemon = s.monitor, s.daemon
        if name == "alloc_sentinel":
            self._alloc_sentinel()
        elif name in ("release_lazy", "release_eager"):
            if not self.secret_grants:
                return
            g = daemon.grants[self.secret_grants[0]]
            daemon.release(g, ReclaimMode.LAZY if name == "release_lazy" else ReclaimMode.EAGER,
                           voluntary=False)
            self.secret_grants.pop(0)
        elif name == "npu_protect":
            mon.npu_set_mode(NpuMode.PROTECTED)
        elif name == "npu_unprotect":
            mon.npu_set_mode(NpuMode.UNPROTECTED)
        elif name == "freeze":
            mon.freeze()
        elif name == "unfreeze":
            mon.unfreeze()

    # -- snapshots ---------------------------------------------------------------
    def snapshot(self) -> tuple:
        """Everything an action can mutate, copied."""
        s = self.system
        m, mon, d = s.mem, s.monitor, s.daemon
        return (
            m.state.copy(), m.owner.copy(), m.pinned.copy(), m.dirty.copy(), dict(m.content),
            {k: (t.mapped.copy(), set(t.mmio_mapped)) for k, t in m.s2.items()},
            {k: (t.mapped.copy(), t.flexmem_only) for k, t in m.smmu.items()},
            m.translation_enabled,
            (mon.npu_mode, mon.protection_enabled, mon.frozen_hash, mon.halted, mon.task_in_flight,
             None if mon._saved_npu_smmu is None else mon._saved_npu_smmu.copy()),
            {k: copy.copy(g) for k, g in d.grants.items()}, copy.copy(d._ids), d._hint, len(d.records),
            len(s.npu.completed), list(self.secret_grants), self.tamper_pending,
        )

    def restore(self, snap: tuple) -> None:
        s = self.system
        m, mon, d = s.mem, s.monitor, s.daemon
        (state, owner, pinned, dirty, content, s2, smmu, trans, monf, grants, ids, hint,
         n_rec, n_done, secret, pending) = snap
        m.state[:], m.owner[:], m.pinned[:], m.dirty[:] = state, owner, pinned, dirty
        m.content = dict(content)
        for k, (mapped, mmio) in s2.items():
            m.s2[k].mapped[:] = mapped
            m.s2[k].mmio_mapped = set(mmio)
        for k, (mapped, only) in smmu.items():
            m.smmu[k].mapped[:] = mapped
            m.smmu[k].flexmem_only = only
        m.translation_enabled = trans
        (mon.npu_mode, mon.protection_enabled, mon.frozen_hash, mon.halted, mon.task_in_flight,
         saved) = monf
        mon._saved_npu_smmu = None if saved is None else saved.copy()
        d.grants = {k: copy.copy(g) for k, g in grants.items()}
        d._ids = copy.copy(ids)
        d._hint = hint
        del d.records[n_rec:]
        del s.npu.completed[n_done:]
        self.secret_grants = list(secret)
        self.tamper_pending = pending

    # -- state identity -----------------------------------------------------------
    def _content_tag(self, page: int) -> int:
        # bytes objects cache their hash; keys only live within one process
        data = self.system.mem.content.get(page)
        return 0 if data is None else hash(data)

    def page_class(self, page: int) -> tuple:
        m = self.system.mem
        return (m.mmio_region(page) or "", int(m.state[page]), int(m.owner[page]),
                bool(m.pinned[page]), bool(m.dirty[page]), bool(m.s2_normal.mapped[page]),
                bool(m.s2_sandbox.mapped[page]),
                tuple(bool(t.mapped[page]) for t in m.smmu.values()),
                int(m.tz_range.start <= page < m.tz_range.stop),
                int(page in m.ranges["monitor"]), self._content_tag(page))

    def key(self) -> bytes:
        m, mon = self.system.mem, self.system.monitor
        h = hashlib.blake2b(digest_size=16)
        for arr in (m.state, m.owner, m.pinned, m.dirty, m.s2_normal.mapped, m.s2_sandbox.mapped):
            h.update(arr.tobytes())
        for d in sorted(m.smmu):
            h.update(m.smmu[d].mapped.tobytes() + bytes([m.smmu[d].flexmem_only]))
        h.update(",".join(sorted(m.s2_normal.mmio_mapped)).encode())
        h.update(",".join(sorted(m.s2_sandbox.mmio_mapped)).encode())
        h.update(repr(sorted((p, hash(d)) for p, d in m.content.items())).encode())
        h.update(repr((mon.protection_enabled, mon.halted, mon.npu_mode.value,
                       m.translation_enabled, tuple(self.secret_grants))).encode())
        return h.digest()

    # -- checks -------------------------------------------------------------------
    def _secret_in(self, data: bytes | None) -> str | None:
        if not data:
            return None
        if self.sentinel[:32] in data:
            return "sentinel"
        if self.key_bytes in data:
            return "tz-key"
        return None

    def exposed_pages(self) -> np.ndarray:
        """Frames whose content the normal world can read right now."""
        m = self.system.mem
        if not m.translation_enabled:
            readable = m.state != PageState.TZ_SECURE
        else:
            readable = m.s2_normal.mapped.copy()
        for t in m.smmu.values():
            if not t.flexmem_only:
                readable |= t.mapped & (m.state != PageState.TZ_SECURE)
        mmio = m.mmio_of >= 0
        return np.flatnonzero(readable & ~mmio)

    def check(self) -> list[tuple[str, str]]:
        out = []
        m, mon = self.system.mem, self.system.monitor
        for p in self.exposed_pages().tolist():
            what = self._secret_in(m.content.get(p))
            if what:
                out.append(("plaintext", f"{what} readable on frame {p}"))
        try:
            if mon.protection_enabled:
                mon.check_invariants(full=True)
            else:
                # frozen: the kernel edits SMMU tables directly and only the
                # TZ address-space controller guards the static partition
                mon.check_invariants(full=False)
                if (m.state != PageState.UNPROTECTED).sum() != len(m.tz_range):
                    out.append(("invariant", "secure frames other than TZ exist while frozen"))
        except SimulationError as exc:
            out.append(("invariant", str(exc)))
        image = b"".join(m.read_raw(p) for p in mon.monitor_pages.tolist())
        if image != self.monitor_image and mon.protection_enabled and not mon.halted:
            out.append(("tamper", "monitor image modified while the secure path is live"))
        return out


def _pages_by_class(world: World, pages) -> list[int]:
    seen, reps = set(), []
    for p in pages:
        c = world.page_class(p)
        if c not in seen:
            seen.add(c)
            reps.append(p)
    return reps


def enumerate_actions(world: World, campaign: AttackCampaign, *, symmetric: bool = True) -> list[tuple]:
    """The action alphabet in ``world``; one representative per frame class if ``symmetric``."""
    m = world.system.mem
    frames = list(range(m.total_frames))
    reps = _pages_by_class(world, frames) if symmetric else frames
    devices = sorted(m.smmu)
    npu_page = m.ranges["mmio:npu"].start
    acts: list[tuple] = []
    for a in campaign.actions:
        if a in ("kernel_read", "kernel_write"):
            acts += [(a, p) for p in reps]
        elif a in ("dma_read", "dma_write", "smmu_reconfig"):
            acts += [(a, d, p) for d in devices for p in reps]
        elif a == "npu_mmio_poke":
            acts += [(a, npu_page, src, dst) for src in reps for dst in reps]
        elif a == "tamper_monitor":
            # one representative bit per monitor frame (all offsets are symmetric)
            n = len(world.system.monitor.monitor_pages)
            acts += [(a, i * PAGE_SIZE * 8) for i in range(n)]
        elif a == "replay_request":
            acts.append((a,))
    acts += [(s,) for s in campaign.secure_actions]
    return acts


def apply(world: World, action: tuple, shared: _Shared, report: SecurityReport) -> list[tuple[str, str]]:
    """Perform one action; returns findings it directly produced."""
    m, mon = world.system.mem, world.system.monitor
    name = action[0]
    K = Actor.NORMAL_KERNEL
    found = []
    try:
        if name in SECURE_ACTIONS:
            try:
                world.secure_step(name)
            except IntegrityViolation:
                if world.tamper_pending:
                    report.tamper_detected += 1
                    world.tamper_pending = False
        elif name == "kernel_read":
            out = m.cpu_access(K, action[1], Access.READ)
            what = world._secret_in(out.data) if out.ok else None
            if what:
                found.append(("plaintext", f"kernel read {what} from frame {action[1]}"))
        elif name == "kernel_write":
            p = action[1]
            before = m.state[p]
            out = m.cpu_access(K, p, Access.WRITE, ATTACKER_FILL)
            if out.ok and before not in (PageState.UNPROTECTED, PageState.LAZY_RECLAIM) \
                    and m.mmio_region(p) is None:
                found.append(("integrity", f"kernel wrote protected frame {p}"))
            if out.ok and p in set(mon.monitor_pages.tolist()):
                world.tamper_pending = True
                report.tamper_attempts += 1
        elif name in ("dma_read", "dma_write") and action[1] == mon.npu_device \
                and mon.npu_mode is NpuMode.PROTECTED:
            # the protected NPU is driven only from the sandbox
            pass
        elif name == "dma_read":
            out = m.dma_access(action[1], action[2], Access.READ)
            what = world._secret_in(out.data) if out.ok else None
            if what:
                found.append(("plaintext", f"{action[1]} DMA read {what} from frame {action[2]}"))
        elif name == "dma_write":
            before = m.state[action[2]]
            out = m.dma_access(action[1], action[2], Access.WRITE, ATTACKER_FILL)
            if out.ok and before != PageState.UNPROTECTED:
                found.append(("integrity", f"{action[1]} DMA wrote protected frame {action[2]}"))
        elif name == "smmu_reconfig":
            mon.kernel_smmu_update(action[1], [action[2]], map=True)
        elif name == "npu_mmio_poke":
            _, mmio_page, src, dst = action
            before = m.state[dst]
            out = m.cpu_access(K, mmio_page, Access.WRITE, NpuDevice.copy_command(src, dst))
            npu = world.system.npu
            if out.ok and npu.completed and npu.completed[-1][:2] == (src, dst) and npu.completed[-1][2]:
                if before != PageState.UNPROTECTED:
                    found.append(("integrity", f"NPU copy by the kernel wrote protected frame {dst}"))
        elif name == "tamper_monitor":
            bit = action[1]
            page = int(mon.monitor_pages[bit // (PAGE_SIZE * 8)])
            out = m.cpu_access(K, page, Access.READ)
            if out.ok:
                data = bytearray(out.data)
                off = (bit // 8) % PAGE_SIZE
                data[off] ^= 1 << (bit % 8)
                if m.cpu_access(K, page, Access.WRITE, bytes(data)).ok:
                    world.tamper_pending = True
                    report.tamper_attempts += 1
        elif name == "replay_request":
            report.replay_attempts += 1
            try:
                shared.framework.invoke(shared.captured)
                found.append(("replay", "replayed request accepted"))
            except ReplayDetected:
                report.replay_detected += 1
    except SimulationError:
        # refused by the model (fault handler, hook rejection, halted path)
        pass
    return found


def _frozen_tamper_passes(world: World) -> bool:
    """Would a pending frozen-state tamper survive verification?"""
    mon = world.system.monitor
    if mon.protection_enabled or mon.halted:
        return False
    image = b"".join(world.system.mem.read_raw(p) for p in mon.monitor_pages.tolist())
    if image == world.monitor_image:
        return False
    snap = world.snapshot()
    try:
        mon.unfreeze()
    except IntegrityViolation:
        return False
    finally:
        world.restore(snap)
    return True


def _step(world, action, shared, report, trace):
    found = apply(world, action, shared, report)
    found += world.check()
    if _frozen_tamper_passes(world):
        found.append(("tamper", "frozen tamper passes unfreeze verification"))
    return [Finding(k, trace, d) for k, d in found]


def run_attack(campaign: AttackCampaign | None = None) -> SecurityReport:
    campaign = campaign or AttackCampaign()
    shared = _Shared(campaign.seed)
    report = SecurityReport(campaign.exploration, campaign.depth)
    root = World(campaign.seed, campaign.total_frames)
    report.findings += [Finding(k, (), d) for k, d in root.check()]
    if campaign.exploration == "exhaustive":
        _explore(root, campaign, shared, report)
    else:
        _random_traces(root, campaign, shared, report)
    # one finding per (kind, detail) is enough to act on
    uniq = {}
    for f in report.findings:
        uniq.setdefault((f.kind, f.detail), f)
    report.findings = list(uniq.values())
    return report


def _explore(root: World, campaign, shared, report):
    world = root
    seen = {root.key()}
    frontier = [(root.snapshot(), ())]
    for _ in range(campaign.depth):
        nxt = []
        for snap, trace in frontier:
            world.restore(snap)
            actions = enumerate_actions(world, campaign)
            for action in actions:
                world.restore(snap)
                t = trace + (action,)
                report.transitions += 1
                report.findings += _step(world, action, shared, report, t)
                k = world.key()
                if k not in seen:
                    seen.add(k)
                    nxt.append((world.snapshot(), t))
        report.traces += len(frontier)
        frontier = nxt
    report.states = len(seen)


def _random_traces(root: World, campaign, shared, report):
    rng = np.random.default_rng(campaign.seed)
    seen = {root.key()}
    start = root.snapshot()
    world = root
    for _ in range(campaign.n_traces):
        world.restore(start)
        trace = ()
        for _ in range(campaign.depth):
            acts = enumerate_actions(world, campaign, symmetric=False)
            action = acts[int(rng.integers(len(acts)))]
            trace += (action,)
            report.transitions += 1
            report.findings += _step(world, action, shared, report, trace)
            seen.add(world.key())
        report.traces += 1
    report.states = len(seen)


# --------------------------------------------------------------------------
# bit-flip sweep of the monitor image
# --------------------------------------------------------------------------

@dataclass
class TamperSweep:
    bits: int
    detected: int

    @property
    def rate(self) -> float:
        return self.detected / self.bits if self.bits else 1.0


def tamper_sweep(seed: int = 0, *, bits=None) -> TamperSweep:
    """Freeze, flip one monitor-image bit from the kernel, unfreeze; for every bit.

    After each trial the frame is restored and the monitor is put back in
    the frozen state it had before the flip.
    """
    world = World(seed)
    # the monitor only freezes with nothing held
    for gid in list(world.secret_grants):
        world.system.daemon.release(world.system.daemon.grants[gid], ReclaimMode.EAGER, voluntary=False)
    world.secret_grants.clear()
    mem, mon = world.system.mem, world.system.monitor
    mon.freeze()
    saved_hash = mon.frozen_hash
    pages = mon.monitor_pages.tolist()
    total = len(pages) * PAGE_SIZE * 8
    bits = range(total) if bits is None else bits
    K = Actor.NORMAL_KERNEL
    n = detected = 0
    for bit in bits:
        page = pages[bit // (PAGE_SIZE * 8)]
        original = mem.read_raw(page)
        data = bytearray(original)
        data[(bit // 8) % PAGE_SIZE] ^= 1 << (bit % 8)
        assert mem.cpu_access(K, page, Access.WRITE, bytes(data)).ok
        n += 1
        try:
            mon.unfreeze()
        except IntegrityViolation:
            detected += 1
        mem.content[page] = original
        # back to the frozen snapshot
        mon.halted = False
        mon.protection_enabled = False
        mon.frozen_hash = saved_hash
        mem.translation_enabled = False
    return TamperSweep(n, detected)
