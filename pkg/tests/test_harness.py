import os
import subprocess
import sys
import textwrap

import pytest

from flexsim.errors import ConfigError
from flexsim.harness import cli
from flexsim.harness.config import library, parse_scenario, resolve
from flexsim.harness.experiments import event_digest, run_scenario
from flexsim.harness.report import ExperimentResult, Table, emit_report

GOOD = """\
flexsim_scenario: 1
name: t
experiment: calibration
"""


def _parse(extra: str):
    return parse_scenario(GOOD + textwrap.dedent(extra))


@pytest.mark.parametrize("extra, field, line", [
    ("colour: blue\n", "colour", 4),
    ("workload:\n  prompt_lengths: [32]\n  decode_token: 4\n", "workload.decode_token", 6),
    ("timing:\n  mmap_ms_per_gib: fast\n", "timing.mmap_ms_per_gib", 5),
    ("modes: [FlexServe, Turbo]\n", "modes", 4),
])
def test_config_errors_name_line_and_field(extra, field, line):
    with pytest.raises(ConfigError) as exc:
        _parse(extra)
    assert exc.value.line == line
    assert exc.value.field.startswith(field)
    assert f"line {line}" in str(exc.value)


def test_bad_version_and_unknown_experiment():
    with pytest.raises(ConfigError, match="version"):
        parse_scenario(GOOD.replace("scenario: 1", "scenario: 2"))
    with pytest.raises(ConfigError, match="unknown experiment") as exc:
        parse_scenario(GOOD.replace("calibration", "warp_drive"))
    assert exc.value.line == 3


def test_unknown_timing_field():
    with pytest.raises(ConfigError) as exc:
        _parse("timing:\n  flux_capacitor: 1.21\n")
    assert exc.value.field == "timing.flux_capacitor"
    with pytest.raises(ConfigError) as exc:
        _parse("timing:\n  mmap_ms_per_gib: -1.0\n")
    assert exc.value.field.startswith("timing")


def test_missing_required_key():
    with pytest.raises(ConfigError) as exc:
        parse_scenario("flexsim_scenario: 1\nname: t\n")
    assert exc.value.field == "experiment"


def test_not_yaml():
    with pytest.raises(ConfigError):
        parse_scenario("name: [unclosed\n")


@pytest.mark.parametrize("name", sorted(library()))
def test_library_scenarios_parse_and_round_trip(name):
    sc = resolve(name)
    again = parse_scenario(sc.to_yaml())
    assert again == sc


def test_serialized_scenario_replays_same_events():
    sc = resolve("breakdown")
    again = parse_scenario(sc.to_yaml())
    assert event_digest(again) == event_digest(sc)


def test_digest_depends_on_the_scenario():
    sc = resolve("breakdown")
    other = parse_scenario(sc.to_yaml().replace("background_gib: [0", "background_gib: [2"))
    assert event_digest(other) != event_digest(sc)


def test_reports_are_byte_identical_across_runs():
    a = emit_report(run_scenario(resolve("alloc_speedup")), "csv")
    b = emit_report(run_scenario(resolve("alloc_speedup")), "csv")
    assert a == b and a


def test_empty_table_has_header_only():
    res = ExperimentResult("s", "e", tables={"ttft": Table(["model", "ttft_ms_FlexServe"])})
    assert emit_report(res, "csv") == {"s__ttft.csv": "model,ttft_ms_FlexServe\n"}


def test_ratio_columns_are_column_division():
    t = Table(["ttft_ms_FlexServe", "ttft_ms_Strawman"])
    t.add(2.0, 10.0)
    t.add(4.0, 6.0)
    added = t.add_ratio_columns(["ttft_ms_Strawman"], "ttft_ms_FlexServe", strip="ttft_ms_")
    assert added == ["ratio_Strawman"]
    assert t.column("ratio_Strawman") == [5.0, 1.5]


def test_summary_text_lists_checks():
    res = run_scenario(resolve("alloc_speedup"))
    text = emit_report(res, "summary-text")["summary.txt"]
    assert "PASS speedup" in text


# ----------------------------------------------------------------- CLI

def test_cli_simulate_ok(tmp_path):
    assert cli.main(["simulate", "--scenario", "alloc_speedup", "--out", str(tmp_path)]) == 0
    names = {p.name for p in tmp_path.iterdir()}
    assert "summary.txt" in names and "alloc_speedup.digest" in names
    assert any(n.endswith(".csv") for n in names)


def test_cli_config_error_exits_1(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(GOOD + "colour: blue\n")
    assert cli.main(["simulate", "--scenario", str(bad)]) == 1
    assert "line 4" in capsys.readouterr().err
    assert cli.main(["simulate", "--scenario", str(tmp_path / "missing.yaml")]) == 1
    # non-security scenario handed to ``attack``
    assert cli.main(["attack", "--scenario", "alloc_speedup"]) == 1


def test_cli_failed_check_exits_2(tmp_path):
    sc = tmp_path / "strict.yaml"
    sc.write_text(resolve("alloc_speedup").to_yaml().replace("[11.32, 11.34]", "[100.0, 200.0]"))
    assert "100.0" in sc.read_text()
    assert cli.main(["simulate", "--scenario", str(sc)]) == 2


def test_cli_security_finding_exits_3(monkeypatch):
    def fake(sc):
        res = ExperimentResult(sc.name, sc.experiment)
        res.security_findings = 1
        return res
    monkeypatch.setattr(cli, "run_scenario", fake)
    assert cli.main(["attack", "--scenario", "protocol"]) == 3


def test_cli_attack_protocol_clean():
    assert cli.main(["attack", "--scenario", "protocol", "--seed", "5"]) == 0


def test_cli_report_formats(tmp_path, capsys):
    assert cli.main(["report", "--scenario", "calibration", "--format", "csv"]) == 0
    out = capsys.readouterr().out
    assert "# calibration__calibration.csv" in out
    assert cli.main(["report", "--scenario", "calibration", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "summary.txt").exists()


def test_cli_scenarios_lists_library(capsys):
    assert cli.main(["scenarios"]) == 0
    out = capsys.readouterr().out
    assert all(name in out for name in library())


def test_cli_bench_kernels(tmp_path):
    assert cli.main(["bench", "--repeat", "1", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "kernels.csv").read_text().startswith("kernel,")


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "flexsim", "scenarios"], capture_output=True, text=True)
    assert r.returncode == 0 and "calibration" in r.stdout


def test_numpy_fallback_matches_in_subprocess():
    code = ("import flexsim._accel as a, flexsim\n"
            "from flexsim.harness.config import resolve\n"
            "from flexsim.harness.experiments import run_scenario\n"
            "assert not a.HAVE_NUMBA\n"
            "r = run_scenario(resolve('breakdown'))\n"
            "print(r.passed, r.metrics['cpu_compute_ms'])\n")
    env = dict(os.environ, FLEXSIM_DISABLE_NUMBA="1")
    r = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, env=env)
    assert r.returncode == 0, r.stderr
    assert r.stdout.split() == ["True", "30060.0"]
