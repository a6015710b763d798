import numpy as np
import pytest

from flexsim.daemon import gib_frames
from flexsim.errors import OutOfMemory, ResourcesHeld
from flexsim.monitor import ReclaimMode
from flexsim.physmem import Owner, PageState
from flexsim.system import System
from flexsim.timing import GIB, PAGE_SIZE
from helpers import small_system


def test_flexmem_allocate_accepts_fragmented_memory():
    s = small_system(background_gib=0)
    rng = np.random.default_rng(0)
    s.daemon.occupy_background(20, rng)
    g = s.daemon.flexmem_allocate(10)
    assert g.frames == 10 and g.protected
    assert (s.mem.state[g.pages] == PageState.FLEXMEM).all()
    assert (s.mem.owner[g.pages] == Owner.DAEMON).all()


def test_allocation_latency_8gib_matches_calibration():
    s = System.build(total_gib=9.0, frozen=False, logging=False)
    g = s.daemon.flexmem_allocate(gib_frames(8))
    assert g.latency_ms == pytest.approx(568.58)
    assert s.daemon.release(g, ReclaimMode.LAZY) == pytest.approx(80.50)


def test_cma_region_is_contiguous_and_secure():
    s = System.build(total_gib=17.0, background_gib=8, frozen=False, logging=False)
    r = s.daemon.cma_allocate(gib_frames(8), 8.0)
    assert r.latency_ms == pytest.approx(6440.67)
    assert (s.mem.state[r.pages] == PageState.TZ_SECURE).all()
    assert np.all(np.diff(r.pages) == 1)
    assert r.migrated > 0
    s.mem.check_invariants()
    s.daemon.cma_release(r)
    assert (s.mem.state[r.pages] == PageState.UNPROTECTED).all()


def test_swap_when_memory_is_short():
    s = small_system(background_gib=0)
    free = s.daemon.free_frames()
    s.daemon.occupy_background(free - 2, np.random.default_rng(1))
    g = s.daemon.flexmem_allocate(5)
    assert g.frames == 5
    assert g.latency_ms > s.timing.flexmem_alloc(5 * PAGE_SIZE)


def test_out_of_memory():
    s = small_system()
    with pytest.raises(OutOfMemory):
        s.daemon.flexmem_allocate(10_000)


def test_release_refuses_live_activation():
    s = small_system()
    s.memmgr.alloc_activation("r1", 8192)
    g = s.memmgr.activations["r1"].grant
    with pytest.raises(ResourcesHeld):
        s.daemon.release(g)
    s.memmgr.complete_request("r1")
    assert g.grant_id not in s.daemon.grants


def test_records_csv_has_header():
    s = small_system()
    s.daemon.flexmem_allocate(1)
    lines = s.daemon.records_csv().splitlines()
    assert lines[0] == "grant_id,frames,mode,latency_ms"
    assert len(lines) == 3
