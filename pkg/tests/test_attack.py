import pytest

from flexsim.harness.attack import (AttackCampaign, World, enumerate_actions, run_attack,
                                    tamper_sweep)
from flexsim.monitor import FlexMonitor, ReclaimMode
from flexsim.physmem import PageState
from flexsim.timing import PAGE_SIZE


def test_shallow_exhaustive_campaign_is_clean():
    rep = run_attack(AttackCampaign(depth=2))
    assert rep.clean, rep.findings[:3]
    assert rep.states > 1
    assert rep.replay_attempts == rep.replay_detected > 0


def test_random_campaign_is_clean():
    rep = run_attack(AttackCampaign(exploration="randomized", depth=6, n_traces=60, seed=3))
    assert rep.clean, rep.findings[:3]
    assert rep.traces == 60


def test_frozen_tamper_is_always_caught_in_campaign():
    rep = run_attack(AttackCampaign(depth=3, actions=("tamper_monitor", "kernel_write"),
                                    secure_actions=("release_eager", "freeze", "unfreeze")))
    assert rep.clean, rep.findings[:3]
    assert rep.tamper_attempts > 0


def test_tamper_sweep_subset_detects_every_bit():
    total = 4 * PAGE_SIZE * 8
    sweep = tamper_sweep(0, bits=range(0, total, 509))
    assert sweep.bits == len(range(0, total, 509))
    assert sweep.rate == 1.0


def test_symmetry_reduction_keeps_one_frame_per_class():
    w = World(0)
    full = enumerate_actions(w, AttackCampaign(), symmetric=False)
    reduced = enumerate_actions(w, AttackCampaign())
    assert len(reduced) < len(full)
    assert {a[0] for a in reduced} == {a[0] for a in full}


def test_leaked_plaintext_is_reported():
    w = World(0)
    page = next(p for p in w.exposed_pages().tolist() if w.system.mem.state[p] == PageState.UNPROTECTED)
    w.system.mem.content[page] = w.sentinel
    assert any(k == "plaintext" for k, _ in w.check())


def test_campaign_finds_a_release_that_skips_clearing(monkeypatch):
    honest = FlexMonitor.unprotect_pages

    def leaky(self, pages, mode=ReclaimMode.LAZY):
        kept = {int(p): self.mem.content.get(int(p)) for p in pages}
        latency = honest(self, pages, mode)
        for p, data in kept.items():
            if data is not None:
                self.mem.content[p] = data
        return latency

    monkeypatch.setattr(FlexMonitor, "unprotect_pages", leaky)
    rep = run_attack(AttackCampaign(depth=2, actions=("kernel_read",),
                                    secure_actions=("release_eager",)))
    assert rep.plaintext_observations > 0


def test_unknown_capability_rejected():
    with pytest.raises(ValueError):
        AttackCampaign(actions=("kernel_read", "physical_probe"))
