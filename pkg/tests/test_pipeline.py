import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flexsim import kernels
from flexsim.errors import DigestMismatch
from flexsim.manifest import ModelStore, build_sealed_model, synthetic_manifest
from flexsim.physmem import PageState
from flexsim.pipeline import COMPUTE, Mode, plan_prefill, run_decode, run_prefill
from flexsim.system import System
from flexsim.timing import PAGE_SIZE, TimingModel
from helpers import small_layout

CATALOG_MODELS = ["Qwen3-0.6B", "Qwen3-1.7B", "Llama3.2-3B", "Llama3.1-8B", "Qwen3-8B"]


@pytest.mark.parametrize("mode", list(Mode))
@pytest.mark.parametrize("tokens", [1, 32, 512])
def test_plan_and_engine_agree(mode, tokens):
    m = synthetic_manifest("Qwen3-1.7B")
    plan = plan_prefill(m, tokens, mode)
    r = run_prefill(m, tokens, mode)
    assert r.finish_us - r.arrival_us == plan.ttft_us()
    assert round(r.compute_ms * 1000) == plan.compute_us


def test_strawman_is_fully_serial():
    m = synthetic_manifest("Qwen3-1.7B")
    plan = plan_prefill(m, 128, Mode.STRAWMAN)
    assert plan.ttft_us() == plan.setup_us + int(plan.durations.sum())


def test_compute_breakdown_at_calibration_point():
    m = synthetic_manifest("Calib-8GiB")
    cpu = plan_prefill(m, 128, Mode.STRAWMAN)
    npu = plan_prefill(m, 128, Mode.STRAWMAN_OPT)
    assert int(cpu.components["compute"].sum()) == 30_060_000
    assert int(npu.components["compute"].sum()) == 1_940_000
    assert run_prefill(m, 128, Mode.STRAWMAN).compute_ms == 30060.0


@pytest.mark.parametrize("model", CATALOG_MODELS)
@pytest.mark.parametrize("tokens", [32, 128, 1024])
def test_mode_ordering(model, tokens):
    m = synthetic_manifest(model)
    f, o, w = (plan_prefill(m, tokens, md).ttft_us()
               for md in (Mode.FLEXSERVE, Mode.STRAWMAN_OPT, Mode.STRAWMAN))
    assert f < o < w


@given(st.integers(1, 2048), st.integers(0, 28))
def test_caching_never_hurts(tokens, k):
    m = synthetic_manifest("Qwen3-1.7B")
    a = plan_prefill(m, tokens, Mode.FLEXSERVE, cached=k)
    b = plan_prefill(m, tokens, Mode.FLEXSERVE, cached=min(k + 1, m.n_layers))
    assert b.ttft_us() <= a.ttft_us()
    assert a.stall_us() >= 0


@pytest.mark.parametrize("mode", [Mode.FLEXSERVE, Mode.STRAWMAN_OPT])
def test_numba_and_numpy_plans_agree(mode):
    m = synthetic_manifest("Llama3.1-8B")
    p = plan_prefill(m, 256, mode)
    assert p.ttft_us(use_numba=True) == p.ttft_us(use_numba=False)
    assert np.array_equal(p.finish_us(use_numba=True), p.finish_us(use_numba=False))


def test_fully_cached_ttft_is_setup_plus_compute():
    m = synthetic_manifest("Qwen3-1.7B")
    p = plan_prefill(m, 128, Mode.FLEXSERVE, cached=m.n_layers)
    assert p.stall_us() == 0
    assert p.ttft_us() == p.setup_us + int(p.durations[:, COMPUTE].sum())


def _sealed_system():
    store = ModelStore()
    man = build_sealed_model("tiny", [3 * PAGE_SIZE, 2 * PAGE_SIZE, 5000], store, seed=3)
    s = System.build(layout=small_layout(96), store=store, frozen=True, seed=3)
    return s, man


def test_live_prefill_decrypts_into_flexmem():
    s, man = _sealed_system()
    r = run_prefill(man, 8, Mode.FLEXSERVE, system=s)
    assert r.ttft_ms > 0
    assert s.memmgr.resident_layers("tiny") == 3
    for i, g in enumerate(s.memmgr.weights.layers["tiny"]):
        assert (s.mem.state[g.pages] == PageState.FLEXMEM).all()
        plain = s.mem.secure_read(g.pages, man.layers[i].byte_size)
        from flexsim.sealing import sha256
        assert sha256(plain).hex() == man.layers[i].plaintext_digest
    s.memmgr.check_accounting()


def test_warm_second_request_is_faster():
    s, man = _sealed_system()
    cold = run_prefill(man, 8, Mode.FLEXSERVE, system=s)
    warm = run_prefill(man, 8, Mode.FLEXSERVE, system=s)
    assert warm.cached == 3 and warm.ttft_ms < cold.ttft_ms


def test_tampered_ciphertext_is_rejected():
    s, man = _sealed_system()
    ref = man.layers[1].ciphertext
    blob = bytearray(s.store.blobs[ref])
    blob[40] ^= 1
    s.store.blobs[ref] = bytes(blob)
    with pytest.raises(DigestMismatch):
        run_prefill(man, 8, Mode.FLEXSERVE, system=s)
    assert s.memmgr.resident_layers("tiny") == 1


def test_decode_latencies():
    m = synthetic_manifest("Qwen3-1.7B")
    t = TimingModel()
    f = run_decode(m, 128, 4, Mode.FLEXSERVE, timing=t)
    w = run_decode(m, 128, 4, Mode.STRAWMAN, timing=t)
    assert len(f) == 4 and all(x > 0 for x in f)
    assert np.mean(w) > np.mean(f)
    assert run_decode(m, 128, 0, Mode.FLEXSERVE) == []


def test_kernel_cross_check_on_plan():
    m = synthetic_manifest("Qwen3-8B")
    p = plan_prefill(m, 64, Mode.FLEXSERVE)
    assert p.ttft_us() - p.setup_us == int(kernels.flow_shop_finish(p.durations)[-1, -1])
