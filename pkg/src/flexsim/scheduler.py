"""Multi-model scheduling: zero-stall cache lines, workflow prefetch and
cache-share allocation under a memory budget."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .manifest import ModelManifest
from .memmgr import LruModelPolicy
from .pipeline import (ALLOC, COMPUTE, DECRYPT, Mode, _channel, _Job, _stage_done, _stage_hook,
                       build_decode, build_prefill, collect, plan_prefill)
from .timing import PAGE_SIZE, TimingModel, us

__all__ = [
    "CacheLinePlan", "CacheShareState", "LruModelPolicy", "ModelStats", "PrefetchResult",
    "WorkflowResult", "WorkflowSpec", "WorkflowStep", "adjust_cache_shares", "prefetch_next",
    "run_workflow", "stall_us", "zero_stall_prefix",
]


def _support(prompt_tokens) -> list[tuple[int, float]]:
    if isinstance(prompt_tokens, (int, np.integer)):
        return [(int(prompt_tokens), 1.0)]
    return [(int(t), float(p)) for t, p in prompt_tokens]


# --------------------------------------------------------------------------
# zero-stall cache line
# --------------------------------------------------------------------------

def stall_us(model: ModelManifest, prompt_tokens: int, cached: int, timing: TimingModel,
             mode=Mode.FLEXSERVE, *, use_numba=None) -> int:
    plan = plan_prefill(model, prompt_tokens, mode, timing, cached=cached)
    return plan.stall_us(use_numba=use_numba)


def zero_stall_prefix(model: ModelManifest, prompt_tokens, timing: TimingModel | None = None, *,
                      mode=Mode.FLEXSERVE, use_numba=None) -> int:
    """Fewest leading resident layers that make the prefill stall-free.

    ``prompt_tokens`` is a count or a ``[(tokens, probability), ...]``
    histogram; for a histogram the answer covers every support point.
    Caching more layers never adds stall, so a bisection over k is exact.
    """
    timing = timing or TimingModel()
    best = 0
    for tokens, p in _support(prompt_tokens):
        if p <= 0:
            continue
        lo, hi = best, model.n_layers
        while lo < hi:
            mid = (lo + hi) // 2
            if stall_us(model, tokens, mid, timing, mode, use_numba=use_numba) == 0:
                hi = mid
            else:
                lo = mid + 1
        best = lo
    return best


@dataclass
class CacheLinePlan:
    k_zero_stall: dict[str, int]
    prompt_distribution: list[tuple[int, float]]

    def __post_init__(self):
        for m, k in self.k_zero_stall.items():
            if k < 0:
                raise ValueError(f"{m}: negative cache line")

    @classmethod
    def compute(cls, manifests: dict[str, ModelManifest], prompt_distribution,
                timing: TimingModel | None = None) -> "CacheLinePlan":
        dist = _support(prompt_distribution)
        return cls({m: zero_stall_prefix(man, dist, timing) for m, man in sorted(manifests.items())},
                   dist)


# --------------------------------------------------------------------------
# workflows and prefetch
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class WorkflowStep:
    model_id: str
    prompt_tokens: int
    output_tokens: int


@dataclass(frozen=True)
class WorkflowSpec:
    name: str
    steps: tuple[WorkflowStep, ...]
    predictable: bool = True

    def __post_init__(self):
        if not self.steps:
            raise ValueError(f"workflow {self.name!r} has no steps")

    def validate(self, manifests: dict[str, ModelManifest]) -> None:
        for s in self.steps:
            if s.model_id not in manifests:
                raise KeyError(f"workflow {self.name!r}: unknown model {s.model_id!r}")


@dataclass
class PrefetchResult:
    model_id: str
    planned: list[int]
    scheduled: list[int]
    truncated: bool
    tasks: list = field(default_factory=list)


def _secure_frames_in_use(system) -> int:
    return sum(system.memmgr.resident_bytes().values()) // PAGE_SIZE


def prefetch_next(system, workflow: WorkflowSpec, current_step: int,
                  manifests: dict[str, ModelManifest], *, budget_bytes: int | None = None,
                  full_model: bool = False, switch_after=None) -> PrefetchResult:
    """Load the next step's model prefix in the background.

    Layers that fit in the current headroom start at once on the load-side
    channels, overlapping the running decode.  The rest wait for
    ``switch_after`` (the last decode task of the current step); at that
    point the current model's tail layers are reclaimed to make room.  What
    still does not fit is dropped, prefix first kept, and a
    ``budget_exhausted`` event is logged.
    """
    if current_step + 1 >= len(workflow.steps) or not workflow.predictable:
        return PrefetchResult("", [], [], False)
    engine, mm, t = system.engine, system.memmgr, system.timing
    cur = workflow.steps[current_step]
    nxt = workflow.steps[current_step + 1]
    model = manifests[nxt.model_id]
    have = mm.resident_layers(model.model_id)
    target = model.n_layers if full_model else zero_stall_prefix(model, nxt.prompt_tokens, t)
    mm.set_zero_stall(model.model_id, target)
    planned = [i for i in range(have, target) if (model.model_id, i) not in system.inflight]
    free = system.daemon.free_frames()
    if budget_bytes is None:
        headroom = free
    else:
        headroom = min(free, budget_bytes // PAGE_SIZE - _secure_frames_in_use(system))
    frames = model.layer_frames
    now_layers, later_layers = [], []
    used = 0
    for i in planned:
        if used + frames[i] <= headroom:
            now_layers.append(i)
            used += int(frames[i])
        else:
            break
    rest = planned[len(now_layers):]
    reclaimable = 0
    if switch_after is not None and cur.model_id != nxt.model_id:
        reclaimable = int(sum(g.frames for g in mm.weights.layers.get(cur.model_id, ())))
    room = max(0, headroom - used) + reclaimable
    for i in rest:
        if frames[i] <= room:
            later_layers.append(i)
            room -= int(frames[i])
        else:
            break
    scheduled = now_layers + later_layers
    truncated = len(scheduled) < len(planned)
    if truncated:
        engine.record("scheduler", "budget_exhausted",
                      {"model": model.model_id, "planned": len(planned), "scheduled": len(scheduled)})
    if not scheduled:
        return PrefetchResult(model.model_id, planned, [], truncated)

    plan = plan_prefill(model, nxt.prompt_tokens, Mode.FLEXSERVE, t, cached=0)
    job = _Job(plan, model, engine.now, None)
    gate = None
    if later_layers:
        need = int(frames[later_layers].sum())

        def short():
            gap = system.daemon.free_frames() - need
            if budget_bytes is not None:
                gap = min(gap, budget_bytes // PAGE_SIZE - _secure_frames_in_use(system) - need)
            return gap < 0

        def evict_current(task):
            lat = 0.0
            while short() and mm.resident_layers(cur.model_id) > 0:
                lat += mm.evict_weight_tail(cur.model_id)
            return us(lat)
        gate = engine.task(f"switch:{cur.model_id}->{model.model_id}", "mem", 0,
                           deps=[switch_after], actor="scheduler",
                           payload={"from": cur.model_id, "to": model.model_id},
                           on_start=evict_current)
    tasks = []
    for i in scheduled:
        prev = gate if i in later_layers else None
        for s in range(ALLOC, COMPUTE):
            cell = engine.task(f"prefetch:{model.model_id}:{s}:{i}", _channel(Mode.FLEXSERVE, s),
                               int(plan.durations[i, s]), deps=[prev], actor="scheduler",
                               priority=(i, s), payload={"model": model.model_id, "layer": i},
                               on_start=_stage_hook(system, job, i, s),
                               on_finish=_prefetch_done(system, job, i, s))
            tasks.append(cell)
            prev = cell
        system.inflight[(model.model_id, i)] = prev
    engine.record("scheduler", "prefetch", {"model": model.model_id, "now": now_layers,
                                            "after_switch": later_layers})
    return PrefetchResult(model.model_id, planned, scheduled, truncated, tasks)


def _prefetch_done(system, job, i, s):
    inner = _stage_done(system, job, i, s)

    def on_finish(task):
        inner(task)
        if s == DECRYPT:
            system.inflight.pop((job.model.model_id, i), None)
    return on_finish


@dataclass
class WorkflowResult:
    name: str
    mode: Mode
    response_ms: float
    step_ttft_ms: list[float]
    step_decode_ms: list[float]


def _chain_finish(task, fn):
    prev = task.on_finish

    def on_finish(t):
        if prev is not None:
            prev(t)
        fn(t)
    task.on_finish = on_finish


def run_workflow(system, workflow: WorkflowSpec, manifests: dict[str, ModelManifest], mode=Mode.FLEXSERVE,
                 *, prefetch: bool = True, budget_bytes: int | None = None,
                 full_model: bool = False) -> WorkflowResult:
    """Response latency: every step's full generation plus the last step's TTFT.

    Each step arrives the moment the previous one finishes generating.
    """
    mode = Mode(mode)
    workflow.validate(manifests)
    engine, mm = system.engine, system.memmgr
    steps = workflow.steps
    jobs: list = [None] * len(steps)
    decode_end: list = [None] * len(steps)
    start = engine.now

    def start_step(k):
        step = steps[k]
        model = manifests[step.model_id]
        last = k == len(steps) - 1
        deps = []
        if mode.uses_cma and system.daemon.cma_regions:
            # the previous step's region is handed back before carving the next
            lat = sum(system.daemon.cma_release(r) for r in list(system.daemon.cma_regions))
            deps = [engine.task(f"cma-release:{k}", "mem", us(lat), actor=mode.value)]
        cached = mm.resident_layers(model.model_id) if mode is Mode.FLEXSERVE else 0
        plan = plan_prefill(model, step.prompt_tokens, mode, system.timing, cached=cached,
                            background_gib=system.background_gib,
                            unfreeze=mode is Mode.FLEXSERVE and not system.monitor.protection_enabled,
                            block_tokens=mm.block_tokens)
        job = jobs[k] = build_prefill(engine, model, plan, system=system, deps=deps)
        tail = job.cells[-1][COMPUTE]
        if last:
            return
        decode = []
        if step.output_tokens > 1:
            decode = build_decode(engine, model, step.prompt_tokens, step.output_tokens - 1, mode,
                                  timing=system.timing, system=system,
                                  sequence_id=job.sequence_id if mode is Mode.FLEXSERVE else None,
                                  deps=[tail])
        end_task = decode[-1] if decode else tail
        decode_end[k] = end_task
        if prefetch and mode is Mode.FLEXSERVE:
            _chain_finish(tail, lambda t: engine.schedule(
                "prefetch-trigger", 0, actor="scheduler",
                callback=lambda: prefetch_next(system, workflow, k, manifests,
                                               budget_bytes=budget_bytes, full_model=full_model,
                                               switch_after=end_task)))

        def next_step(t):
            if mode is Mode.FLEXSERVE:
                mm.close_sequence(job.sequence_id)
            engine.schedule("workflow-step", 0, actor="scheduler", callback=lambda: start_step(k + 1))
        _chain_finish(end_task, next_step)

    start_step(0)
    engine.run_until_quiescent()
    results = [collect(j) for j in jobs]
    ttfts = [r.ttft_ms for r in results]
    decodes = [0.0 if decode_end[k] is None else (decode_end[k].finish_us - r.finish_us) / 1000.0
               for k, r in enumerate(results)]
    return WorkflowResult(workflow.name, mode, (results[-1].finish_us - start) / 1000.0,
                          ttfts, decodes)


# --------------------------------------------------------------------------
# cache shares
# --------------------------------------------------------------------------

@dataclass
class ModelStats:
    request_frequency: float
    prompt_hist: tuple[tuple[int, float], ...]
    cached_fraction: float = 0.0
    cached_layers: int = 0

    def observe(self, requested: bool, prompt_tokens: int | None = None, alpha: float = 0.2):
        """EWMA update of the request frequency and the prompt histogram."""
        self.request_frequency = (1 - alpha) * self.request_frequency + alpha * float(requested)
        if prompt_tokens is not None:
            hist = {t: (1 - alpha) * p for t, p in self.prompt_hist}
            hist[int(prompt_tokens)] = hist.get(int(prompt_tokens), 0.0) + alpha
            self.prompt_hist = tuple(sorted(hist.items()))


@dataclass
class CacheShareState:
    models: dict[str, ModelStats]
    watermark: int
    decisions: list[dict] = field(default_factory=list)

    def cached_bytes(self, manifests: dict[str, ModelManifest]) -> int:
        return sum(int(manifests[m].layer_frames[:s.cached_layers].sum()) * PAGE_SIZE
                   for m, s in self.models.items())


def expected_stall_ms(model: ModelManifest, hist, cached: int, timing: TimingModel) -> float:
    total = sum(p for _, p in hist) or 1.0
    return sum(p * stall_us(model, t, cached, timing) for t, p in hist) / total / 1000.0


def share_value(stats: CacheShareState, manifests, alloc: dict[str, int], timing) -> float:
    """Expected TTFT saved per request mix for a layer allocation."""
    v = 0.0
    for m, s in stats.models.items():
        base = expected_stall_ms(manifests[m], s.prompt_hist, 0, timing)
        v += s.request_frequency * (base - expected_stall_ms(manifests[m], s.prompt_hist,
                                                              alloc.get(m, 0), timing))
    return v


def _value_curves(stats: CacheShareState, manifests, timing) -> dict[str, np.ndarray]:
    """Per model: frequency-weighted stall saved with j resident layers, j = 0..n."""
    out = {}
    for m, s in stats.models.items():
        man = manifests[m]
        st = np.array([expected_stall_ms(man, s.prompt_hist, j, timing) for j in range(man.n_layers + 1)])
        out[m] = s.request_frequency * (st[0] - st)
    return out


def _greedy_fill(ids, curve, cum, k, left, fixed, decisions) -> int:
    """Repeatedly add the affordable run of layers with the best gain per byte.

    Runs of any length are considered, so a model whose first layers gain
    nothing but whose later ones do is still reachable.  Ties go to the
    lower model id.  Returns the frames left over.
    """
    while True:
        best = None
        for m in ids:
            if m in fixed:
                continue
            for b in range(k[m] + 1, len(cum[m])):
                cost = int(cum[m][b] - cum[m][k[m]])
                if cost > left:
                    break
                gain = curve[m][b] - curve[m][k[m]]
                if gain <= 0:
                    continue
                if best is None or gain / cost > best[0] * (1 + 1e-12):
                    best = (gain / cost, m, b, cost)
        if best is None:
            return left
        ratio, m, b, cost = best
        decisions.extend({"model": m, "layer": j, "marginal_value_per_byte": ratio}
                         for j in range(k[m], b))
        k[m] = b
        left -= cost


def _seeded_greedy(stats, manifests, curve, budget_frames):
    """Greedy fill, also tried from every single-model prefix as a seed.

    Plain ratio greedy can strand budget behind one large layer; seeding
    with each model's prefix lengths and keeping the best outcome closes
    that gap at small cost (models x layers greedy runs).
    """
    ids = sorted(stats.models)
    cum = {m: np.concatenate(([0], np.cumsum(manifests[m].layer_frames))) for m in ids}
    seeds = [(None, 0)] + [(m, j) for m in ids for j in range(1, manifests[m].n_layers + 1)]
    best = None
    for seed_model, j in seeds:
        k = {m: 0 for m in ids}
        decisions = []
        fixed = set()
        left = budget_frames
        if seed_model is not None:
            cost = int(cum[seed_model][j])
            if cost > left:
                continue
            k[seed_model] = j
            left -= cost
            fixed.add(seed_model)
            decisions.extend({"model": seed_model, "layer": i, "marginal_value_per_byte": None,
                              "seed": True} for i in range(j))
        left = _greedy_fill(ids, curve, cum, k, left, fixed, decisions)
        value = sum(curve[m][k[m]] for m in ids)
        if best is None or value > best[0] * (1 + 1e-12) + 1e-12:
            best = (value, k, left, decisions)
    _, k, left, decisions = best
    # spare budget: zero-gain layers, hottest model first, so nothing sits idle
    for m in sorted(ids, key=lambda m: (-stats.models[m].request_frequency, m)):
        frames = manifests[m].layer_frames
        while k[m] < len(frames) and frames[k[m]] <= left:
            left -= int(frames[k[m]])
            decisions.append({"model": m, "layer": k[m], "marginal_value_per_byte": 0.0})
            k[m] += 1
    return k, decisions


def _shrink(stats, manifests, curve, budget_frames):
    """Evict tail layers, cheapest loss per byte first, until the budget holds."""
    k = {m: s.cached_layers for m, s in stats.models.items()}
    decisions = []
    used = sum(int(manifests[m].layer_frames[:k[m]].sum()) for m in k)
    while used > budget_frames:
        m = min((m for m in sorted(k) if k[m] > 0),
                key=lambda m: ((curve[m][k[m]] - curve[m][k[m] - 1]) / manifests[m].layer_frames[k[m] - 1], m))
        k[m] -= 1
        used -= int(manifests[m].layer_frames[k[m]])
        decisions.append({"model": m, "layer": k[m], "evicted": True})
    return k, decisions


def adjust_cache_shares(stats: CacheShareState, budget: int, manifests: dict[str, ModelManifest],
                        timing: TimingModel | None = None) -> CacheShareState:
    """Split ``budget`` bytes of weight cache across models.

    When ``budget`` is below the state's watermark (budget was taken away)
    the current allocation only shrinks, evicting the tail layers whose loss
    per byte is smallest, so no model's share grows.  Otherwise the shares
    are recomputed by seeded marginal-value greedy.
    """
    if budget < 0:
        raise ValueError("budget must be non-negative")
    timing = timing or TimingModel()
    curve = _value_curves(stats, manifests, timing)
    frames = int(budget) // PAGE_SIZE
    if budget < stats.watermark:
        alloc, decisions = _shrink(stats, manifests, curve, frames)
    else:
        alloc, decisions = _seeded_greedy(stats, manifests, curve, frames)
    models = {m: replace(s, cached_layers=alloc[m],
                         cached_fraction=alloc[m] / manifests[m].n_layers)
              for m, s in stats.models.items()}
    return CacheShareState(models, int(budget), decisions)
