import numpy as np
import pytest

from flexsim.errors import InvalidPage, InvariantViolation, NotMonitor, UnknownDevice
from flexsim.physmem import PAGE_SIZE, Access, Actor, MemoryLayout, Outcome, PageState, PhysicalMemory
from helpers import small_layout


@pytest.fixture
def mem():
    return PhysicalMemory(small_layout())


def test_layout_ranges_are_contiguous_and_cover_memory():
    lay = small_layout(64)
    ranges = lay.ranges()
    pos = 0
    for r in ranges.values():
        assert r.start == pos
        pos = r.stop
    assert pos == 64
    assert len(ranges["general"]) == 64 - lay.reserved_frames


def test_layout_rejects_overcommit():
    with pytest.raises(ValueError):
        MemoryLayout(total_frames=8)


def test_tz_frames_fault_for_normal_world(mem):
    tz = mem.tz_range.start
    out = mem.cpu_access(Actor.NORMAL_KERNEL, tz, Access.READ)
    assert out.status is Outcome.TZ_FAULT
    assert mem.cpu_access(Actor.SECURE_WORLD, tz, Access.READ).ok


def test_write_then_read_roundtrip(mem):
    p = mem.general.start
    assert mem.cpu_access(Actor.NORMAL_APP, p, Access.WRITE, b"abc").ok
    data = mem.cpu_access(Actor.NORMAL_APP, p, Access.READ).data
    assert data[:3] == b"abc" and len(data) == PAGE_SIZE


def test_invalid_page(mem):
    with pytest.raises(InvalidPage):
        mem.cpu_access(Actor.NORMAL_KERNEL, 10_000, Access.READ)
    with pytest.raises(UnknownDevice):
        mem.dma_access("gpu", 0, Access.READ)


def test_dma_needs_smmu_mapping(mem):
    p = mem.general.start
    assert mem.dma_access("disk", p, Access.READ).status is Outcome.SMMU_FAULT
    mem.map_pages(Actor.MONITOR, mem.smmu["disk"], [p])
    assert mem.dma_access("disk", p, Access.READ).ok


def test_only_monitor_edits_tables(mem):
    with pytest.raises(NotMonitor):
        mem.map_pages(Actor.NORMAL_KERNEL, mem.smmu["disk"], [mem.general.start])
    with pytest.raises(NotMonitor):
        mem.set_state(Actor.SECURE_WORLD, [mem.general.start], PageState.FLEXMEM)


def test_state_change_rejected_while_mapped(mem):
    p = mem.general.start
    with pytest.raises(InvariantViolation):
        mem.set_state(Actor.MONITOR, [p], PageState.FLEXMEM)
    assert mem.state[p] == PageState.UNPROTECTED


def test_partition_counts_sum_to_total(mem):
    assert sum(mem.partition_counts().values()) == mem.total_frames


def test_secure_write_read(mem):
    pages = np.arange(mem.tz_range.start, mem.tz_range.start + 2)
    blob = bytes(range(256)) * 20
    mem.secure_write(pages, blob)
    assert mem.secure_read(pages, len(blob)) == blob
    with pytest.raises(ValueError):
        mem.secure_write(pages[:1], blob)
