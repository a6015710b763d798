import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flexsim.errors import (AlreadyProtected, IntegrityViolation, NotLazy, NotPinned, NotProtected,
                            ResourcesHeld, SecurePathHalted, SmmuHookRejected, TaskInFlight)
from flexsim.monitor import NpuMode, ReclaimMode
from flexsim.physmem import Access, Actor, Outcome, PageState
from flexsim.timing import GIB
from helpers import small_system

K = Actor.NORMAL_KERNEL


@pytest.fixture
def sys_():
    return small_system()


def _pinned(s, n=3):
    return s.daemon.allocate_pinned(n).pages


def test_protect_hides_pages_from_kernel_and_dma(sys_):
    s = sys_
    pages = _pinned(s)
    s.mem.map_pages(Actor.MONITOR, s.mem.smmu["disk"], pages)
    lat = s.monitor.protect_pages(pages)
    assert lat == pytest.approx(s.timing.flexmem_protect(3 * 4096))
    for p in pages:
        assert s.mem.cpu_access(K, int(p), Access.READ).status is Outcome.STAGE2_FAULT
        assert s.mem.dma_access("disk", int(p), Access.READ).status is Outcome.SMMU_FAULT
    assert (s.mem.state[pages] == PageState.FLEXMEM).all()


def test_protect_preconditions(sys_):
    s = sys_
    assert s.monitor.protect_pages([]) == 0.0
    with pytest.raises(NotPinned):
        s.monitor.protect_pages([s.mem.general.start + 40])
    pages = _pinned(s)
    s.monitor.protect_pages(pages)
    with pytest.raises(AlreadyProtected):
        s.monitor.protect_pages(pages)


def test_eager_unprotect_clears(sys_):
    s = sys_
    g = s.daemon.flexmem_allocate(2)
    s.mem.secure_write(g.pages, b"\xaa" * 8192)
    s.monitor.unprotect_pages(g.pages, ReclaimMode.EAGER)
    for p in g.pages:
        assert s.mem.cpu_access(K, int(p), Access.READ).data == bytes(4096)


def test_lazy_unprotect_never_leaks_old_bytes(sys_):
    s = sys_
    g = s.daemon.flexmem_allocate(2)
    s.mem.secure_write(g.pages, b"\x55" * 8192)
    s.monitor.unprotect_pages(g.pages, ReclaimMode.LAZY)
    a, b = map(int, g.pages)
    assert s.mem.cpu_access(K, a, Access.READ).data == bytes(4096)
    assert s.mem.cpu_access(K, b, Access.WRITE, b"new").ok
    assert s.mem.cpu_access(K, b, Access.READ).data[:3] == b"new"
    assert s.mem.count(PageState.LAZY_RECLAIM) == 0


def test_on_reuse_contract(sys_):
    s = sys_
    g = s.daemon.flexmem_allocate(1)
    p = int(g.pages[0])
    with pytest.raises(NotLazy):
        s.monitor.on_reuse(p)
    s.monitor.unprotect_pages(g.pages)
    s.monitor.on_reuse(p, b"C" * 4096)
    assert s.mem.cpu_access(K, p, Access.READ).data == b"C" * 4096
    with pytest.raises(NotProtected):
        s.monitor.unprotect_pages([p])


def test_reclaim_latency_at_8gib():
    assert pytest.approx(80.50) == small_system().timing.flexmem_reclaim(8 * GIB)


def test_npu_mode_switch_moves_mmio_and_driver(sys_):
    s, mon, mem = sys_, sys_.monitor, sys_.mem
    before = (set(mem.s2_normal.mmio_mapped), mem.s2_normal.mapped.copy(),
              mem.smmu["npu"].mapped.copy())
    assert mon.npu_set_mode(NpuMode.PROTECTED) == pytest.approx(0.21)
    npu_mmio = mem.region_pages("mmio:npu")[0]
    assert mem.cpu_access(K, int(npu_mmio), Access.WRITE, b"x").status is Outcome.STAGE2_FAULT
    assert not mem.s2_normal.mapped[mon.driver_pages].any()
    mon.npu_set_mode(NpuMode.UNPROTECTED)
    assert set(mem.s2_normal.mmio_mapped) == before[0]
    assert np.array_equal(mem.s2_normal.mapped, before[1])
    assert np.array_equal(mem.smmu["npu"].mapped, before[2])


def test_protected_npu_dma_only_reaches_flexmem(sys_):
    s = sys_
    g = s.daemon.flexmem_allocate(2)
    s.monitor.npu_set_mode(NpuMode.PROTECTED)
    npu = s.mem.smmu["npu"]
    assert set(np.flatnonzero(npu.mapped)) == set(g.pages.tolist())
    with pytest.raises(SmmuHookRejected):
        s.monitor.kernel_smmu_update("npu", [s.mem.general.start + 30])
    g2 = s.daemon.flexmem_allocate(1)
    assert npu.mapped[g2.pages].all()


def test_task_in_flight_blocks_switch(sys_):
    sys_.monitor.task_in_flight = True
    with pytest.raises(TaskInFlight):
        sys_.monitor.npu_set_mode(NpuMode.PROTECTED)


def test_kernel_smmu_hook_refuses_protected_frames(sys_):
    s = sys_
    g = s.daemon.flexmem_allocate(1)
    with pytest.raises(SmmuHookRejected):
        s.monitor.kernel_smmu_update("disk", g.pages)
    with pytest.raises(SmmuHookRejected):
        s.monitor.kernel_smmu_update("disk", [s.monitor.monitor_pages[0]])


def test_freeze_unfreeze_roundtrip(sys_):
    mon = sys_.monitor
    assert mon.freeze() == pytest.approx(2.83)
    assert mon.frozen_hash is not None and not mon.protection_enabled
    mon.check_invariants()
    assert mon.unfreeze() == pytest.approx(0.13 + 2.83)
    assert mon.frozen_hash is None and mon.protection_enabled


def test_freeze_requires_release(sys_):
    g = sys_.daemon.flexmem_allocate(1)
    with pytest.raises(ResourcesHeld):
        sys_.monitor.freeze()
    sys_.daemon.release(g)
    sys_.monitor.freeze()


def test_freeze_scrubs_lazy_frames(sys_):
    s = sys_
    g = s.daemon.flexmem_allocate(1)
    s.mem.secure_write(g.pages, b"secret" * 10)
    s.daemon.release(g, ReclaimMode.LAZY)
    s.monitor.freeze()
    assert s.mem.cpu_access(K, int(g.pages[0]), Access.READ).data == bytes(4096)


@given(st.integers(0, 4 * 4096 * 8 - 1))
def test_any_bit_flip_while_frozen_is_detected(bit):
    s = small_system()
    mon = s.monitor
    mon.freeze()
    page = int(mon.monitor_pages[bit // (4096 * 8)])
    data = bytearray(s.mem.cpu_access(K, page, Access.READ).data)
    off = bit % (4096 * 8)
    data[off // 8] ^= 1 << (off % 8)
    assert s.mem.cpu_access(K, page, Access.WRITE, bytes(data)).ok
    with pytest.raises(IntegrityViolation):
        mon.unfreeze()
    with pytest.raises(SecurePathHalted):
        s.daemon.flexmem_allocate(1)


def test_protect_while_frozen_unfreezes_first():
    s = small_system(frozen=True)
    pages = s.daemon.allocate_pinned(1).pages
    lat = s.monitor.protect_pages(pages)
    assert lat == pytest.approx(0.13 + 2.83 + s.timing.flexmem_protect(4096))
    assert s.monitor.protection_enabled
