"""One test per acceptance criterion; each records a PASS/FAIL line."""
import time

import pytest

from conftest import ACCEPTANCE
from flexsim.harness.config import resolve
from flexsim.harness.experiments import run_scenario
from flexsim.harness.traces import run_memmgr_trace

pytestmark = pytest.mark.acceptance


def _timed(name):
    t0 = time.perf_counter()
    res = run_scenario(resolve(name))
    return res, time.perf_counter() - t0


def _verdict(n: int, ok: bool, text: str):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {text}"
    ACCEPTANCE[n] = line
    print(line)
    assert ok, line


def _failed(*results):
    bad = [c.line() for r in results for c in r.checks if not c.passed]
    return f"({'; '.join(bad)})" if bad else ""


def test_criterion_1_calibration():
    # the first run in a process also loads the cached numba kernels
    run_scenario(resolve("calibration"))
    res, wall = _timed("calibration")
    ok = res.passed and wall < 1.0
    _verdict(1, ok, f"calibration max rel error {res.metrics['max_rel_error']:.2e}, "
                    f"{wall:.2f} s {_failed(res)}")


def test_criterion_2_allocation_speedup():
    res, _ = _timed("alloc_speedup")
    _verdict(2, res.passed, f"Flex-Mem vs CMA 8 GiB allocation {res.metrics['speedup']:.4f}x")


def test_criterion_3_breakdown_and_ordering():
    res, _ = _timed("breakdown")
    sweep, _ = _timed("default_sweep")
    t = sweep.tables["ttft"]
    ordered = all(f < o < s for f, o, s in zip(t.column("ttft_ms_FlexServe"),
                                              t.column("ttft_ms_StrawmanOpt"),
                                              t.column("ttft_ms_Strawman")))
    ok = res.passed and ordered
    _verdict(3, ok, f"CPU compute {res.metrics['cpu_compute_ms'] / 1e3:.2f} s, NPU "
                    f"{res.metrics['npu_compute_ms'] / 1e3:.2f} s, ordering over {len(t.rows)} "
                    f"default-sweep points {'holds' if ordered else 'broken'} {_failed(res)}")


def test_criterion_4_trend_bands():
    res, _ = _timed("default_sweep")
    m = res.metrics
    _verdict(4, res.passed, f"mean ratio vs Strawman {m['mean_ratio_Strawman']:.2f}, "
                            f"vs StrawmanOpt {m['mean_ratio_StrawmanOpt']:.2f}")


def test_criterion_5_zero_stall_oracle():
    res, wall = _timed("zero_stall_oracle")
    n = len(res.tables["oracle"].rows)
    ok = res.passed and n == 200 and wall < 30
    _verdict(5, ok, f"{res.metrics['mismatches']} mismatches on {n} configurations, {wall:.1f} s")


@pytest.mark.slow
def test_criterion_6_security_model_checking():
    att, t1 = _timed("attack_exhaustive")
    tam, t2 = _timed("tamper_sweep")
    ok = att.passed and tam.passed and t1 + t2 < 300
    _verdict(6, ok, f"depth-{resolve('attack_exhaustive').attack.get('depth', 4)} exhaustive: "
                    f"{att.metrics['plaintext_observations']} plaintext, "
                    f"{att.metrics['undetected_tampering']} undetected tampering; "
                    f"tamper sweep {tam.metrics['detection_rate']:.0%} of "
                    f"{tam.metrics['bits']} bits; {t1 + t2:.0f} s {_failed(att, tam)}")


def test_criterion_7_protocol():
    res, _ = _timed("protocol")
    m = res.metrics
    _verdict(7, res.passed, f"honest {m['honest_ok_rate']:.0%}, corruption detected "
                            f"{m['corruption_detection_rate']:.0%} of {m['corruptions']}, "
                            f"replays rejected {m['replay_detection_rate']:.0%}")


def test_criterion_8_memory_manager():
    t0 = time.perf_counter()
    res = run_scenario(resolve("memmgr_traces"))
    extra = [run_memmgr_trace(seed, 1000) for seed in range(100, 105)]
    wall = time.perf_counter() - t0
    ok = res.passed and all(s.ok for s in extra) and wall < 60
    rt = res.metrics["kv_roundtrips"] + sum(s.roundtrips for s in extra)
    _verdict(8, ok, f"{res.metrics['accounting_errors']} accounting errors, "
                    f"{res.metrics['prefix_violations']} prefix violations, "
                    f"{res.metrics['kv_roundtrip_mismatches']} KV mismatches ({rt} round trips), "
                    f"{wall:.1f} s")


def test_criterion_9_prefetch():
    res, _ = _timed("prefetch")
    m = res.metrics
    _verdict(9, res.passed, f"warm-equivalent within {m['max_warm_rel_error']:.1e}, "
                            f"on/off mean ratio {m['mean_ratio']:.2f}")
