"""Command line: ``flexsim {simulate,bench,attack,report,scenarios,manifest}``.

Exit codes: 0 success, 1 configuration error, 2 a scenario check failed,
3 a security finding.
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from ..errors import ConfigError
from ..manifest import CATALOG, synthetic_manifest
from .config import library, resolve
from .experiments import event_digest, run_scenario
from .report import Table, emit_report

EXIT_OK, EXIT_CONFIG, EXIT_CHECK, EXIT_SECURITY = 0, 1, 2, 3
SECURITY_EXPERIMENTS = ("attack", "tamper_sweep", "protocol")


def _scenarios(args):
    out = []
    for name in args.scenario:
        sc = resolve(name)
        if args.seed is not None:
            sc = sc.with_seed(args.seed)
        out.append(sc)
    return out


def _exit_code(results) -> int:
    if any(r.security_findings for r in results):
        return EXIT_SECURITY
    if not all(r.passed for r in results):
        return EXIT_CHECK
    return EXIT_OK


def _run(args, allowed=None, fmt="csv"):
    results = []
    for sc in _scenarios(args):
        if allowed is not None and sc.experiment not in allowed:
            raise ConfigError(f"scenario {sc.name!r} runs {sc.experiment!r}; expected one of "
                              f"{', '.join(allowed)}", field="experiment")
        t0 = time.perf_counter()
        res = run_scenario(sc)
        res.metrics.setdefault("wall_s", time.perf_counter() - t0)
        results.append(res)
        print(res.summary_text(), end="")
    if args.out:
        emit_report(results, fmt, args.out)
        emit_report(results, "summary-text", args.out)
    return results


def cmd_simulate(args) -> int:
    results = _run(args)
    if args.out:
        for sc in _scenarios(args):
            if sc.experiment not in SECURITY_EXPERIMENTS:
                Path(args.out, f"{sc.name}.digest").write_text(event_digest(sc) + "\n")
    return _exit_code(results)


def cmd_bench(args) -> int:
    from .bench import kernel_benchmark
    results = _run(args) if args.scenario else []
    if not args.no_kernels:
        rows = kernel_benchmark(args.seed or 0, args.repeat)
        table = Table(["kernel", "numba_s", "numpy_s", "speedup", "identical"])
        for r in rows:
            table.add(r["kernel"], r["numba_s"], r["numpy_s"], r["speedup"], r["identical"])
        print(table.to_csv(), end="")
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            Path(args.out, "kernels.csv").write_text(table.to_csv())
    return _exit_code(results)


def cmd_attack(args) -> int:
    return _exit_code(_run(args, allowed=SECURITY_EXPERIMENTS))


def cmd_report(args) -> int:
    results = [run_scenario(sc) for sc in _scenarios(args)]
    files = emit_report(results, args.format, args.out)
    if not args.out:
        for name, content in files.items():
            print(f"# {name}")
            print(content, end="")
    return _exit_code(results)


def cmd_scenarios(args) -> int:
    for name, path in library().items():
        sc = resolve(path)
        print(f"{name:<24}{sc.experiment:<20}{sc.description}")
    return EXIT_OK


def cmd_manifest(args) -> int:
    ids = args.model or sorted(CATALOG)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    for mid in ids:
        path = out / f"{mid}.json"
        synthetic_manifest(mid).save(path)
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flexsim", description="Secure-serving simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, need_scenario=True):
        p.add_argument("--scenario", action="append", required=need_scenario, default=[],
                       help="library name or YAML path (repeatable)")
        p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("simulate", help="run scenarios, write CSV tables and event digests")
    common(p)
    p.set_defaults(fn=cmd_simulate)
    p = sub.add_parser("bench", help="run scenarios with timing, plus kernel benchmarks")
    common(p, need_scenario=False)
    p.add_argument("--repeat", type=int, default=10)
    p.add_argument("--no-kernels", action="store_true")
    p.set_defaults(fn=cmd_bench)
    p = sub.add_parser("attack", help="run adversary campaigns and protocol checks")
    common(p)
    p.set_defaults(fn=cmd_attack)
    p = sub.add_parser("report", help="render results as csv or summary text")
    common(p)
    p.add_argument("--format", choices=("csv", "summary-text"), default="summary-text")
    p.set_defaults(fn=cmd_report)
    p = sub.add_parser("scenarios", help="list the shipped scenario library")
    p.set_defaults(fn=cmd_scenarios)
    p = sub.add_parser("manifest", help="write synthetic model manifests")
    p.add_argument("--model", action="append", default=[])
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_manifest)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
