"""Scenario files.

A scenario is a YAML mapping with a versioned header.  Unknown keys are
errors, reported with the line and the dotted field path::

    flexsim_scenario: 1            # required header, format version
    name: default-sweep            # required
    experiment: ttft_sweep         # required, see EXPERIMENTS
    description: free text
    seed: 0
    layout:     {total_gib: 16, tz_frames: 64, total_frames: 16}
    timing:     {<TimingModel field>: value, ...}
    models:     [Calib-8GiB, {id: tiny, total_bytes: 1048576, n_layers: 4}]
    background_gib: [0, 2, 4, 8]   # or a single number
    modes:      [FlexServe, StrawmanOpt, Strawman]
    workload:
      prompt_lengths: [32, 64, 128]
      decode_tokens: 32
      requests: 200
      cache_budget_gib: 4
      prefetch: true
      full_model: false
      groups: [[Qwen3-1.7B, Llama3.2-3B]]
      configs: 200                 # randomized oracle configurations
      max_layers: 32
      events: 1000                 # memory-manager trace length
      workflows:
        - {name: gui, steps: [{model: Qwen3-8B, prompt: 256, output: 32},
                              {model: Llama3.2-3B, prompt: 128, output: 1}]}
    attack:     {exploration: exhaustive, depth: 4, n_traces: 1000, total_frames: 16}
    check:      {<metric>: [lo, hi] | value}
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..errors import ConfigError
from ..manifest import CATALOG, ModelManifest, synthetic_manifest
from ..pipeline import Mode
from ..timing import TimingModel

SCENARIO_VERSION = 1
EXPERIMENTS = ("calibration", "alloc_speedup", "breakdown", "ttft_sweep", "pressure_sweep",
               "zero_stall_oracle", "attack", "tamper_sweep", "protocol", "memmgr_traces",
               "prefetch", "workflows", "multi_model")

NUM = (int, float)
_LIST = "list"

_SCHEMA = {
    "flexsim_scenario": int,
    "name": str,
    "experiment": str,
    "description": str,
    "seed": int,
    "layout": {"total_gib": NUM, "total_frames": int, "tz_frames": int, "monitor_frames": int,
               "driver_code_frames": int, "driver_data_frames": int},
    "timing": "timing",
    "models": "models",
    "background_gib": "numbers",
    "modes": "modes",
    "workload": {
        "prompt_lengths": "ints",
        "decode_tokens": int,
        "requests": int,
        "cache_budget_gib": NUM,
        "prefetch": bool,
        "full_model": bool,
        "groups": "groups",
        "configs": int,
        "max_layers": int,
        "events": int,
        "workflows": "workflows",
    },
    "attack": {"exploration": str, "depth": int, "n_traces": int, "total_frames": int,
               "actions": "strs"},
    "check": "check",
}
_MODEL_KEYS = {"id": str, "total_bytes": int, "n_layers": int, "hidden_size": int,
               "n_kv_heads": int, "head_dim": int}
_WORKFLOW_KEYS = {"name": str, "steps": _LIST, "predictable": bool}
_STEP_KEYS = {"model": str, "prompt": int, "output": int}


@dataclass(frozen=True)
class ModelRef:
    id: str
    total_bytes: int | None = None
    n_layers: int | None = None
    hidden_size: int | None = None
    n_kv_heads: int | None = None
    head_dim: int | None = None

    def manifest(self) -> ModelManifest:
        from ..manifest import ModelConfig
        config = None
        if self.n_layers is not None and self.id not in CATALOG:
            base = ModelConfig(self.n_layers)
            config = ModelConfig(self.n_layers, self.n_kv_heads or base.n_kv_heads,
                                 self.head_dim or base.head_dim, self.hidden_size or base.hidden_size)
        return synthetic_manifest(self.id, total_bytes=self.total_bytes, n_layers=self.n_layers,
                                  config=config)

    def to_obj(self):
        extra = {k: v for k, v in dataclasses.asdict(self).items() if v is not None and k != "id"}
        return self.id if not extra else {"id": self.id, **extra}


@dataclass
class Scenario:
    name: str
    experiment: str
    seed: int = 0
    description: str = ""
    layout: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    models: list[ModelRef] = field(default_factory=list)
    background_gib: list[float] = field(default_factory=lambda: [8.0])
    modes: list[Mode] = field(default_factory=lambda: [Mode.FLEXSERVE, Mode.STRAWMAN_OPT, Mode.STRAWMAN])
    workload: dict = field(default_factory=dict)
    attack: dict = field(default_factory=dict)
    check: dict = field(default_factory=dict)

    def timing_model(self) -> TimingModel:
        return TimingModel.from_overrides(self.timing)

    def manifests(self) -> dict[str, ModelManifest]:
        return {m.id: m.manifest() for m in self.models}

    def to_dict(self) -> dict:
        out = {"flexsim_scenario": SCENARIO_VERSION, "name": self.name,
               "experiment": self.experiment, "seed": self.seed}
        if self.description:
            out["description"] = self.description
        for key in ("layout", "timing", "workload", "attack", "check"):
            if getattr(self, key):
                out[key] = getattr(self, key)
        if self.models:
            out["models"] = [m.to_obj() for m in self.models]
        out["background_gib"] = list(self.background_gib)
        out["modes"] = [Mode(m).value for m in self.modes]
        return out

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def with_seed(self, seed: int) -> "Scenario":
        return dataclasses.replace(self, seed=int(seed))


# --------------------------------------------------------------------------
# validation with line numbers
# --------------------------------------------------------------------------

def _line(node) -> int:
    return node.start_mark.line + 1


def _fail(msg, node, path):
    raise ConfigError(msg, field=path or None, line=_line(node) if node is not None else None)


def _scalar(node, kinds, path):
    if not isinstance(node, yaml.ScalarNode):
        _fail("expected a scalar", node, path)
    value = yaml.safe_load(yaml.serialize(node))
    kinds = kinds if isinstance(kinds, tuple) else (kinds,)
    if isinstance(value, bool) and bool not in kinds:
        _fail(f"expected {'/'.join(k.__name__ for k in kinds)}, got a boolean", node, path)
    if not isinstance(value, kinds):
        _fail(f"expected {'/'.join(k.__name__ for k in kinds)}, got {type(value).__name__}", node, path)
    return value


def _seq(node, path):
    if not isinstance(node, yaml.SequenceNode):
        _fail("expected a list", node, path)
    return node.value


def _map(node, allowed, path):
    if not isinstance(node, yaml.MappingNode):
        _fail("expected a mapping", node, path)
    out = []
    seen = set()
    for k, v in node.value:
        key = _scalar(k, str, path)
        sub = f"{path}.{key}" if path else key
        if key not in allowed:
            _fail(f"unknown key {key!r}", k, sub)
        if key in seen:
            _fail(f"duplicate key {key!r}", k, sub)
        seen.add(key)
        out.append((key, v, sub))
    return out


def _check_value(node, spec, path):
    if isinstance(spec, dict):
        for key, v, sub in _map(node, spec, path):
            _check_value(v, spec[key], sub)
    elif spec in ("ints", "numbers", "strs", "modes"):
        kind = {"ints": int, "numbers": NUM, "strs": str, "modes": str}[spec]
        items = [node] if (spec == "numbers" and isinstance(node, yaml.ScalarNode)) else _seq(node, path)
        for i, item in enumerate(items):
            v = _scalar(item, kind, f"{path}[{i}]")
            if spec == "modes" and v not in {m.value for m in Mode}:
                _fail(f"unknown mode {v!r}", item, f"{path}[{i}]")
    elif spec == "timing":
        known = {f.name for f in dataclasses.fields(TimingModel)}
        for key, v, sub in _map(node, known, path):
            _scalar(v, NUM, sub)
    elif spec == "models":
        for i, item in enumerate(_seq(node, path)):
            sub = f"{path}[{i}]"
            if isinstance(item, yaml.ScalarNode):
                name = _scalar(item, str, sub)
                if name not in CATALOG:
                    _fail(f"unknown catalog model {name!r}; give id/total_bytes/n_layers", item, sub)
            else:
                keys = {k for k, _, _ in _map(item, _MODEL_KEYS, sub)}
                for key, v, s2 in _map(item, _MODEL_KEYS, sub):
                    _scalar(v, _MODEL_KEYS[key], s2)
                if "id" not in keys:
                    _fail("model entry needs an id", item, sub)
    elif spec == "groups":
        for i, g in enumerate(_seq(node, path)):
            for j, item in enumerate(_seq(g, f"{path}[{i}]")):
                _scalar(item, str, f"{path}[{i}][{j}]")
    elif spec == "workflows":
        for i, wf in enumerate(_seq(node, path)):
            sub = f"{path}[{i}]"
            entries = _map(wf, _WORKFLOW_KEYS, sub)
            keys = {k for k, _, _ in entries}
            for key, v, s2 in entries:
                if key == "steps":
                    for j, step in enumerate(_seq(v, s2)):
                        s3 = f"{s2}[{j}]"
                        got = _map(step, _STEP_KEYS, s3)
                        if {k for k, _, _ in got} != set(_STEP_KEYS):
                            _fail("a step needs model, prompt and output", step, s3)
                        for k2, v2, s4 in got:
                            _scalar(v2, _STEP_KEYS[k2], s4)
                else:
                    _scalar(v, _WORKFLOW_KEYS[key], s2)
            if "name" not in keys or "steps" not in keys:
                _fail("a workflow needs name and steps", wf, sub)
    elif spec == "check":
        if not isinstance(node, yaml.MappingNode):
            _fail("expected a mapping", node, path)
        for k, v in node.value:
            sub = f"{path}.{_scalar(k, str, path)}"
            if isinstance(v, yaml.SequenceNode):
                items = _seq(v, sub)
                if len(items) != 2:
                    _fail("a bound is [lo, hi]", v, sub)
                for item in items:
                    _scalar(item, NUM, sub)
            else:
                _scalar(v, (int, float, bool), sub)
    else:
        _scalar(node, spec, path)


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"{source}: not valid YAML: {getattr(exc, 'problem', exc)}",
                          line=mark.line + 1 if mark else None) from exc
    if root is None:
        raise ConfigError(f"{source}: empty scenario")
    entries = _map(root, _SCHEMA, "")
    keys = {k for k, _, _ in entries}
    for req in ("flexsim_scenario", "name", "experiment"):
        if req not in keys:
            raise ConfigError(f"{source}: missing required key", field=req, line=_line(root))
    for key, node, path in entries:
        _check_value(node, _SCHEMA[key], path)
    data = yaml.safe_load(text)
    for key, node, path in entries:
        if key == "flexsim_scenario" and data[key] != SCENARIO_VERSION:
            _fail(f"unsupported scenario version {data[key]} (expected {SCENARIO_VERSION})", node, path)
        if key == "experiment" and data[key] not in EXPERIMENTS:
            _fail(f"unknown experiment {data[key]!r}", node, path)

    models = []
    for m in data.get("models", []):
        models.append(ModelRef(m) if isinstance(m, str) else ModelRef(**m))
    bg = data.get("background_gib", [8.0])
    bg = [float(bg)] if isinstance(bg, (int, float)) else [float(x) for x in bg]
    modes = [Mode(m) for m in data.get("modes", [m.value for m in
                                                  (Mode.FLEXSERVE, Mode.STRAWMAN_OPT, Mode.STRAWMAN)])]
    sc = Scenario(name=data["name"], experiment=data["experiment"], seed=int(data.get("seed", 0)),
                  description=data.get("description", ""), layout=data.get("layout", {}),
                  timing=data.get("timing", {}), models=models, background_gib=bg, modes=modes,
                  workload=data.get("workload", {}), attack=data.get("attack", {}),
                  check=data.get("check", {}))
    try:
        sc.timing_model()
    except ConfigError as exc:
        node = next(n for k, n, _ in entries if k == "timing")
        raise ConfigError(str(exc), field=f"timing.{exc.field}" if exc.field else "timing",
                          line=_line(node)) from exc
    for i, m in enumerate(sc.models):
        try:
            m.manifest()
        except ConfigError as exc:
            raise ConfigError(str(exc), field=f"models[{i}]") from exc
    return sc


def load_scenario(path) -> Scenario:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {p}: {exc.strerror}") from exc
    return parse_scenario(text, str(p))


SCENARIO_DIR = Path(__file__).resolve().parent.parent / "scenarios"


def library() -> dict[str, Path]:
    """Shipped scenarios by name."""
    return {p.stem: p for p in sorted(SCENARIO_DIR.glob("*.yaml"))}


def resolve(name_or_path) -> Scenario:
    lib = library()
    if str(name_or_path) in lib:
        return load_scenario(lib[str(name_or_path)])
    return load_scenario(name_or_path)
