"""Result tables and their CSV / text rendering.

Every table is written as ``<out>/<scenario>__<table>.csv`` with a header
row; floats use a fixed ``%.6f`` format so identical runs give identical
bytes.  Column schemas of the tables the experiments emit:

``ttft``        model, background_gib, prompt_tokens, one ``ttft_ms_<Mode>`` per mode,
                then ``ratio_<Mode>`` = ttft of that mode / FlexServe ttft
``pressure``    same columns as ``ttft``, one row per background level
``calibration`` operation, simulated_ms, target_ms, rel_error
``breakdown``   model, prompt_tokens, device, compute_ms, ttft_ms
``oracle``      config, n_layers, prompt_tokens, fast_k, brute_k, match
``workflows``   workflow, models, ``response_ms_<Mode>`` per mode, ratio columns
``prefetch``    from_model, model, ttft_np_ms, ttft_prefetch_ms, ttft_warm_ms, ratio
``multi_model`` group, ``ttft_ms_<Mode>`` per mode, ratio columns
``security``    metric, value
``memmgr``      metric, value

The summary text lists scalar metrics and every acceptance check with its
bound and verdict.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class Table:
    columns: list[str]
    rows: list[list] = field(default_factory=list)

    def add(self, *row):
        if len(row) != len(self.columns):
            raise ValueError(f"row has {len(row)} cells, table has {len(self.columns)} columns")
        self.rows.append(list(row))

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def add_ratio_columns(self, numerators: list[str], denominator: str, prefix: str = "ratio_",
                          strip: str = "") -> list[str]:
        """Append ``numerator / denominator`` for each numerator column."""
        den = self.column(denominator)
        added = []
        for num in numerators:
            vals = self.column(num)
            name = prefix + (num[len(strip):] if strip and num.startswith(strip) else num)
            self.columns.append(name)
            for row, a, b in zip(self.rows, vals, den):
                row.append(a / b if b else float("nan"))
            added.append(name)
        return added

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([_cell(v) for v in r])
        return buf.getvalue()


def _cell(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.6f}"
    return v


@dataclass(frozen=True)
class Check:
    metric: str
    value: float
    bound: object
    passed: bool

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} {self.metric} = {_fmt(self.value)} (bound {_fmt(self.bound)})"


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


def evaluate(metric: str, value, bound) -> Check:
    if isinstance(bound, (list, tuple)):
        lo, hi = bound
        ok = lo <= value <= hi
    elif isinstance(bound, bool):
        ok = bool(value) is bound
    else:
        ok = value == bound
    return Check(metric, value, bound, bool(ok))


@dataclass
class ExperimentResult:
    scenario: str
    experiment: str
    tables: dict[str, Table] = field(default_factory=dict)
    metrics: dict[str, object] = field(default_factory=dict)
    checks: list[Check] = field(default_factory=list)
    security_findings: int = 0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def apply_checks(self, bounds: dict) -> None:
        for metric, bound in bounds.items():
            if metric not in self.metrics:
                self.checks.append(Check(metric, float("nan"), bound, False))
            else:
                self.checks.append(evaluate(metric, self.metrics[metric], bound))

    def summary_text(self) -> str:
        lines = [f"scenario {self.scenario} ({self.experiment})"]
        for k in sorted(self.metrics):
            lines.append(f"  {k}: {_fmt(self.metrics[k])}")
        for c in self.checks:
            lines.append("  " + c.line())
        return "\n".join(lines) + "\n"


def emit_report(results, fmt: str = "csv", out_dir=None) -> dict[str, str]:
    """Render results; writes files under ``out_dir`` if given.

    Returns ``{filename: content}``.  ``fmt`` is ``csv`` (one file per table)
    or ``summary-text`` (one ``summary.txt``).  An experiment with no rows
    still gets its header-only CSV.
    """
    if isinstance(results, ExperimentResult):
        results = [results]
    files: dict[str, str] = {}
    if fmt == "csv":
        for r in results:
            for name, table in r.tables.items():
                files[f"{r.scenario}__{name}.csv"] = table.to_csv()
    elif fmt == "summary-text":
        files["summary.txt"] = "".join(r.summary_text() for r in results)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, content in files.items():
            (out / name).write_text(content)
    return files
