import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexsim.errors import Insufficient
from flexsim.harness.traces import run_memmgr_trace
from flexsim.manifest import ModelConfig
from flexsim.physmem import PageState
from flexsim.timing import PAGE_SIZE
from helpers import small_system

CFG = ModelConfig(2, 1, 16, 64, 2)   # 128 B of KV per token


def _mm(total=128, **kw):
    kw.setdefault("block_tokens", 4)
    kw.setdefault("materialize_kv", True)
    return small_system(total, **kw).memmgr


def test_kv_blocks_grow_on_boundaries():
    mm = _mm()
    mm.open_sequence("s", "m", CFG)
    mm.kv_append("s", 9)
    seq = mm.sequences["s"]
    assert [p.token_count for p in seq.pages] == [4, 4, 1]
    assert seq.tokens == 9
    assert mm.kv_bytes_for(CFG, 9) == 3 * PAGE_SIZE
    mm.check_accounting()


def test_offload_restore_is_byte_identical():
    mm = _mm()
    mm.open_sequence("s", "m", CFG)
    mm.kv_append("s", 8)
    pages = list(mm.sequences["s"].pages)
    before = [mm.kv_content(p) for p in pages]
    mm.kv_offload(2)
    assert all(p.grant is None for p in pages)
    mm.check_accounting()
    for p, want in zip(pages, before):
        mm.kv_restore(p)
        assert mm.kv_content(p) == want
    mm.check_accounting()


def test_tampered_spill_is_detected():
    from flexsim.errors import SealVerifyFailure
    mm = _mm()
    mm.open_sequence("s", "m", CFG)
    mm.kv_append("s", 4)
    p = mm.sequences["s"].pages[0]
    mm.kv_offload(1)
    b = bytearray(p.blob)
    b[20] ^= 1
    p.blob = bytes(b)
    with pytest.raises(SealVerifyFailure):
        mm.kv_restore(p)


def _lru_from_log(mm):
    """Recompute LRU order of resident pages from the access log alone."""
    last = {}
    for t, tick, key, event in mm.access_log:
        if event in ("touch", "append", "restore"):
            last[key] = (t, tick)
        elif event in ("offload", "drop"):
            last.pop(key, None)
    resident = {p.key for p in mm.kv_pages.values() if p.grant is not None}
    return sorted((k for k in last if k in resident), key=lambda k: last[k])


@settings(max_examples=40)
@given(st.lists(st.tuples(st.sampled_from(["append", "touch", "offload", "restore", "tick"]),
                          st.integers(0, 2), st.integers(1, 6)), max_size=40))
def test_lru_order_matches_access_log(ops):
    s = small_system(128, block_tokens=4, materialize_kv=True)
    mm = s.memmgr
    for i in range(3):
        mm.open_sequence(f"s{i}", "m", CFG)
    for op, i, n in ops:
        sid = f"s{i}"
        if op == "append":
            mm.kv_append(sid, n)
        elif op == "touch":
            mm.touch_sequence(sid)
        elif op == "offload":
            lru = mm.lru_order()
            if lru:
                mm.kv_offload(min(n, len(lru)))
        elif op == "restore":
            spilled = [p for p in mm.sequences[sid].pages if p.grant is None]
            if spilled:
                mm.kv_restore(spilled[0])
        else:
            s.engine.schedule("idle", n * 1000)
            s.engine.run_until_quiescent()
        assert mm.lru_order() == _lru_from_log(mm)
        mm.check_accounting()


def test_reclaim_order_activations_then_kv_then_weight_tail():
    s = small_system(128, block_tokens=4, materialize_kv=True)
    mm, d = s.memmgr, s.daemon
    mm.free_activations_on_completion = False
    for i in range(4):
        mm.add_weight_layer("w", i, d.flexmem_allocate(2, label=f"w:{i}"))
    mm.set_zero_stall("w", 2)
    mm.alloc_activation("r", PAGE_SIZE)
    mm.complete_request("r")
    mm.open_sequence("s", "m", CFG)
    mm.kv_append("s", 4)
    evictable = 1 + sum(p.grant.frames for p in mm.kv_pages.values()) + 8
    victims = mm.select_reclaim_victims(evictable)
    assert [v.kind for v in victims] == ["activation"] + ["kv"] * len(mm.kv_pages) + ["weight"] * 4
    # tail above the zero-stall prefix goes first, then the prefix, tail first
    assert [v.ref for v in victims if v.kind == "weight"] == [("w", 3), ("w", 2), ("w", 1), ("w", 0)]
    assert [v.tier for v in victims if v.kind == "weight"] == [3, 3, 4, 4]


def test_reclaim_shortfall_raises_after_best_effort():
    mm = _mm()
    mm.add_weight_layer("w", 0, mm.daemon.flexmem_allocate(1, label="w:0"))
    with pytest.raises(Insufficient):
        mm.reclaim(50)
    assert mm.resident_layers("w") == 0
    mm.check_accounting()


def test_busy_model_weights_are_not_reclaimed():
    mm = _mm()
    mm.add_weight_layer("w", 0, mm.daemon.flexmem_allocate(1, label="w:0"))
    mm.busy_models.add("w")
    with pytest.raises(Insufficient):
        mm.select_reclaim_victims(1)


@pytest.mark.parametrize("seed", range(5))
def test_random_traces_keep_exact_accounting(seed):
    st_ = run_memmgr_trace(seed, 1000)
    assert st_.events == 1000
    assert not st_.accounting_errors, st_.accounting_errors[:3]
    assert not st_.prefix_violations
    assert st_.roundtrip_mismatches == 0


def test_footprint_csv():
    mm = _mm()
    mm.snapshot()
    assert mm.footprint_csv().splitlines()[0] == "time,weights_bytes,kv_bytes,act_bytes,free_frames"


def test_kernel_reclaim_goes_through_manager():
    s = small_system(128)
    mm = s.memmgr
    mm.add_weight_layer("w", 0, s.daemon.flexmem_allocate(3, label="w:0"))
    s.daemon.kernel_reclaim(2)
    assert mm.resident_layers("w") == 0
    assert s.mem.count(PageState.FLEXMEM) == 0
    mm.check_accounting()
