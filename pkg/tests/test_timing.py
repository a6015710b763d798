import pytest

from flexsim.errors import ConfigError, CycleDetected
from flexsim.timing import GIB, Engine, TimingModel, apportion_us


def test_calibration_constants_reproduce_measured_latencies():
    t = TimingModel()
    assert t.flexmem_alloc(8 * GIB) == pytest.approx(568.58)
    assert t.flexmem_reclaim(8 * GIB) == pytest.approx(80.50)
    assert t.load(8 * GIB) == pytest.approx(3265.34)
    assert t.decrypt(8 * GIB) == pytest.approx(1319.16)
    assert t.smmu_setup(8 * GIB) == pytest.approx(435.48)
    assert t.npu_launch() == pytest.approx(1.28)
    assert t.cma_alloc(8 * GIB, 8.0) == pytest.approx(6440.67)


def test_compute_cpu_vs_npu_at_calibration_point():
    t = TimingModel()
    assert t.compute_latency("NPU", 8 * GIB, 128) == pytest.approx(1940.0)
    assert t.compute_latency("CPU", 8 * GIB, 128) == pytest.approx(30060.0)


def test_cma_cost_grows_with_background():
    t = TimingModel()
    rates = [t.cma_rate_ms_per_gib(bg) for bg in (0, 2, 4, 8, 10)]
    assert rates == sorted(rates)


def test_from_overrides_rejects_unknown_and_nonpositive():
    with pytest.raises(ConfigError) as e:
        TimingModel.from_overrides({"warp_factor": 9})
    assert e.value.field == "warp_factor"
    with pytest.raises(ConfigError) as e:
        TimingModel.from_overrides({"load_ms_per_gib": -1.0})
    assert e.value.field == "load_ms_per_gib"


def test_apportion_sums_exactly():
    sizes = [1, 2, 3, 5, 7]
    parts = apportion_us(0.001, sizes)
    assert int(parts.sum()) == round(0.001 * sum(sizes) * 1000)


def test_engine_serializes_a_channel_and_respects_deps():
    e = Engine()
    a = e.task("a", "x", 10)
    b = e.task("b", "x", 5)
    c = e.task("c", "y", 3, deps=[a])
    e.run_until_quiescent()
    assert (a.start_us, a.finish_us) == (0, 10)
    assert (b.start_us, b.finish_us) == (10, 15)
    assert (c.start_us, c.finish_us) == (10, 13)


def test_engine_detects_cycles():
    e = Engine()
    a = e.task("a", "x", 1)
    b = e.task("b", "x", 1, deps=[a])
    a.after(b)
    with pytest.raises(CycleDetected):
        e.run_until_quiescent()


def test_event_log_digest_is_deterministic():
    def run():
        e = Engine()
        e.record("t", "hello", {"n": 1})
        e.task("a", "x", 7, payload={"k": "v"})
        e.schedule("tick", 3)
        e.run_until_quiescent()
        return e.log.digest(), e.log.to_csv()
    assert run() == run()


def test_negative_durations_rejected():
    e = Engine()
    with pytest.raises(ValueError):
        e.task("a", "x", -1)
    with pytest.raises(ValueError):
        e.schedule("x", -5)
