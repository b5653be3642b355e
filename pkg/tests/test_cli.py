import json
from pathlib import Path

import pytest

from fleetsim.cli import (CSV_HEADER, build_parser, main, parse_scenario,
                          render_csv)
from fleetsim.driver import ConfigError
from fleetsim.report import canonical_json


def write_scenario(tmp_path: Path, name: str = "scenario.json", **overrides) -> Path:
    data = {"device_count": 1, "apps": ["twitter"], "duration_ms": 8000}
    data.update(overrides)
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


# -- parse_scenario ---------------------------------------------------------------


def test_minimal_scenario_gets_documented_defaults(tmp_path):
    scenario = parse_scenario(write_scenario(tmp_path))
    assert scenario.poll_interval_ms == 1000
    assert scenario.intent_delay_ms == 5000
    assert scenario.seed == 0
    assert str(scenario.pool.first) == "10.0.2.100"
    assert str(scenario.pool.last) == "10.0.2.199"
    assert scenario.pool.lease_seconds == 86_400
    assert scenario.thresholds.heavy_bytes == 10_000_000
    assert scenario.thresholds.flow_limit == 100


def test_zero_devices_rejected_with_field_path(tmp_path):
    with pytest.raises(ConfigError) as err:
        parse_scenario(write_scenario(tmp_path, device_count=0))
    assert err.value.path == "device_count"


def test_unknown_key_rejected_by_name(tmp_path):
    with pytest.raises(ConfigError) as err:
        parse_scenario(write_scenario(tmp_path, devcie_count=3))
    assert err.value.path == "devcie_count"


def test_unknown_nested_key_rejected(tmp_path):
    with pytest.raises(ConfigError) as err:
        parse_scenario(write_scenario(tmp_path, pool={"firts": "10.0.0.1"}))
    assert err.value.path == "pool.firts"


def test_bad_types_rejected(tmp_path):
    with pytest.raises(ConfigError):
        parse_scenario(write_scenario(tmp_path, duration_ms="long"))
    with pytest.raises(ConfigError):
        parse_scenario(write_scenario(tmp_path, apps=[1, 2]))
    with pytest.raises(ConfigError):
        parse_scenario(write_scenario(tmp_path, apps="twitter"))


def test_missing_required_field(tmp_path):
    path = tmp_path / "s.json"
    path.write_text(json.dumps({"apps": [], "duration_ms": 100}))
    with pytest.raises(ConfigError) as err:
        parse_scenario(path)
    assert err.value.path == "device_count"


def test_pool_overrides_apply(tmp_path):
    path = write_scenario(tmp_path, pool={"first": "192.168.7.10",
                                          "last": "192.168.7.19",
                                          "router": "192.168.7.1",
                                          "mask": "255.255.255.0",
                                          "lease_seconds": 120})
    scenario = parse_scenario(path)
    assert scenario.pool.size == 10
    assert scenario.pool.lease_seconds == 120


# -- fleet run ---------------------------------------------------------------------


def test_run_writes_canonical_json_and_exit_zero(tmp_path, capsys):
    path = write_scenario(tmp_path)
    assert main(["run", str(path), "--format", "json"]) == 0
    out = capsys.readouterr().out
    data = json.loads(out)
    assert canonical_json(data) == out
    assert data["totals"]["flows"] >= 1


def test_run_same_seed_twice_is_byte_identical(tmp_path, capsys):
    path = write_scenario(tmp_path)
    assert main(["run", str(path), "--seed", "7"]) == 0
    first = capsys.readouterr().out
    assert main(["run", str(path), "--seed", "7"]) == 0
    second = capsys.readouterr().out
    assert first == second


def test_run_missing_scenario_exits_2(tmp_path, capsys):
    assert main(["run", str(tmp_path / "missing.json")]) == 2
    assert "config error" in capsys.readouterr().err


def test_run_invalid_scenario_exits_2(tmp_path, capsys):
    path = write_scenario(tmp_path, device_count=0)
    assert main(["run", str(path)]) == 2


def test_run_devices_override_revalidates(tmp_path, capsys):
    path = write_scenario(tmp_path)
    assert main(["run", str(path), "--devices", "0"]) == 2


def test_fail_on_anomaly_gates_exit_code(tmp_path, capsys):
    quiet = write_scenario(tmp_path, "quiet.json")
    assert main(["run", str(quiet), "--fail-on-anomaly"]) == 0
    capsys.readouterr()
    noisy = write_scenario(tmp_path, "noisy.json",
                           thresholds={"heavy_bytes": 1000})
    assert main(["run", str(noisy), "--fail-on-anomaly"]) == 1
    assert "anomalies detected" in capsys.readouterr().err


def test_run_out_path_writes_file(tmp_path, capsys):
    path = write_scenario(tmp_path)
    out = tmp_path / "report.json"
    assert main(["run", str(path), "--out", str(out)]) == 0
    assert capsys.readouterr().out == ""
    assert json.loads(out.read_text())["totals"]["flows"] >= 1


# -- fleet report -------------------------------------------------------------------


def run_to_file(tmp_path, capsys, **overrides) -> Path:
    scenario = write_scenario(tmp_path, **overrides)
    out = tmp_path / "report.json"
    assert main(["run", str(scenario), "--out", str(out)]) == 0
    capsys.readouterr()
    return out


def test_report_csv_has_contract_header_and_rows(tmp_path, capsys):
    out = run_to_file(tmp_path, capsys)
    assert main(["report", str(out), "--format", "csv"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == CSV_HEADER == \
        "subscriber,app,proto,bytes_up,bytes_down,forwarded,verdict"
    data = json.loads(out.read_text())
    assert len(lines) - 1 == len(data["flows"])


def test_empty_run_renders_header_only_csv(tmp_path, capsys):
    out = run_to_file(tmp_path, capsys, apps=[], duration_ms=3000)
    assert main(["report", str(out), "--format", "csv"]) == 0
    assert capsys.readouterr().out == CSV_HEADER + "\n"


def test_csv_totals_agree_with_json_totals(tmp_path, capsys):
    out = run_to_file(tmp_path, capsys, device_count=2)
    data = json.loads(out.read_text())
    rows = render_csv(data).splitlines()[1:]
    csv_bytes = sum(int(r.split(",")[3]) + int(r.split(",")[4]) for r in rows)
    csv_forwarded = sum(int(r.split(",")[5]) for r in rows)
    assert csv_bytes == data["totals"]["bytes"]
    assert csv_forwarded == data["totals"]["forwarded_bytes"]


def test_report_json_reserialization_is_stable(tmp_path, capsys):
    out = run_to_file(tmp_path, capsys)
    assert main(["report", str(out), "--format", "json"]) == 0
    text = capsys.readouterr().out
    assert canonical_json(json.loads(text)) == text
    assert text == out.read_text()


def test_report_table_lists_subscribers(tmp_path, capsys):
    out = run_to_file(tmp_path, capsys)
    assert main(["report", str(out), "--format", "table"]) == 0
    text = capsys.readouterr().out
    assert "subscriber 10.0.2.100" in text
    assert "social_like" in text


def test_report_on_garbage_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["report", str(bad)]) == 2
    bad.write_text(json.dumps({"flows": []}))
    assert main(["report", str(bad)]) == 2


# -- fleet validate -------------------------------------------------------------------


def test_validate_ok_and_bad(tmp_path, capsys):
    good = write_scenario(tmp_path, "good.json")
    assert main(["validate", str(good)]) == 0
    assert "ok:" in capsys.readouterr().out
    bad = write_scenario(tmp_path, "bad.json", duration_ms=1)
    assert main(["validate", str(bad)]) == 2


def test_parser_rejects_unknown_format(tmp_path):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["run", "s.json", "--format", "xml"])


def test_packaged_demo_scenario_parses():
    import importlib.resources
    demo = importlib.resources.files("fleetsim") / "data" / "scenarios" / "demo.json"
    with importlib.resources.as_file(demo) as path:
        scenario = parse_scenario(path)
    assert scenario.device_count == 4
    assert scenario.apps == ("skype", "twitter", "game", "mystery")
