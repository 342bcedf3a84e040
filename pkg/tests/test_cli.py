import json
from pathlib import Path

import pytest
import yaml

from stormsim.cli import (
    EXIT_CHECK_FAILED,
    EXIT_CONFIG,
    EXIT_OK,
    _parse_listen,
    list_bundled,
    main,
    resolve_scenario,
)
from stormsim.scenario import ScenarioError

from test_runner import pond_raw


@pytest.fixture
def pond_yaml(tmp_path):
    path = tmp_path / "pondlet.yaml"
    path.write_text(yaml.safe_dump(pond_raw()), encoding="utf-8")
    return path


def test_list_bundled_names():
    names = list_bundled()
    assert "malletts-hold-release" in names
    assert "dfw-flash-flood" in names


def test_resolve_prefers_existing_path(pond_yaml):
    assert resolve_scenario(str(pond_yaml)) == pond_yaml


def test_resolve_falls_back_to_bundled():
    path = resolve_scenario("malletts-hold-release")
    assert path.name == "malletts-hold-release.yaml"
    assert path.exists()


def test_resolve_unknown_mentions_bundled():
    with pytest.raises(ScenarioError, match="malletts-hold-release"):
        resolve_scenario("no-such-scenario")


def test_parse_listen():
    assert _parse_listen("0.0.0.0:9000") == ("0.0.0.0", 9000)
    with pytest.raises(ScenarioError):
        _parse_listen("localhost")
    with pytest.raises(ScenarioError):
        _parse_listen(":80")


def test_scenarios_subcommand(capsys):
    assert main(["scenarios"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "malletts-hold-release" in out
    assert "dfw-flash-flood" in out


def test_validate_bundled(capsys):
    assert main(["validate", "dfw-flash-flood"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "dfw-flash-flood: ok" in out
    assert "config hash" in out


def test_validate_missing_is_config_error(capsys):
    assert main(["validate", "missing.yaml"]) == EXIT_CONFIG
    assert "scenario error" in capsys.readouterr().err


def test_validate_rejects_bad_scenario(tmp_path, capsys):
    bad = pond_raw()
    del bad["catchments"]["hill"]["area_km2"]
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(bad), encoding="utf-8")
    assert main(["validate", str(path)]) == EXIT_CONFIG
    assert "scenario error" in capsys.readouterr().err


def test_run_writes_bundle(pond_yaml, tmp_path, capsys):
    out = tmp_path / "bundle"
    assert main(["run", str(pond_yaml), "--out", str(out)]) == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["scenario"] == "pondlet"
    assert manifest["seed"] == 11
    assert manifest["control"] is True
    printed = capsys.readouterr().out
    assert "pondlet" in printed
    assert str(out) in printed


def test_run_seed_and_control_flags(pond_yaml, tmp_path, capsys):
    out = tmp_path / "b"
    code = main(["run", str(pond_yaml), "--seed", "99",
                 "--disable-control", "--out", str(out)])
    assert code == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 99
    assert manifest["control"] is False
    capsys.readouterr()


def test_run_check_pass(tmp_path, capsys):
    raw = pond_raw(checks=[
        {"metric": "mass_error_relative", "op": "<=", "value": 1e-6},
        {"metric": "peak_outlet_flow_cms", "op": ">", "value": 0.0},
    ])
    path = tmp_path / "ok.yaml"
    path.write_text(yaml.safe_dump(raw), encoding="utf-8")
    out = tmp_path / "bundle"
    assert main(["run", str(path), "--check", "--out", str(out)]) == EXIT_OK
    lines = [l for l in capsys.readouterr().out.splitlines()
             if l.startswith("check ")]
    assert len(lines) == 2
    assert all("pass" in l for l in lines)


def test_run_check_failure_exits_3(tmp_path, capsys):
    raw = pond_raw(checks=[
        {"metric": "peak_outlet_flow_cms", "op": ">=", "value": 1e9},
        {"metric": "mass_error_relative", "op": "<=", "value": 1e-6},
    ])
    path = tmp_path / "doomed.yaml"
    path.write_text(yaml.safe_dump(raw), encoding="utf-8")
    out = tmp_path / "bundle"
    code = main(["run", str(path), "--check", "--out", str(out)])
    assert code == EXIT_CHECK_FAILED
    captured = capsys.readouterr()
    assert "check FAIL" in captured.out
    assert "1 check(s) failed" in captured.err
    # the bundle still lands on disk for post-mortems
    assert (out / "manifest.json").exists()


def test_report_roundtrip(pond_yaml, tmp_path, capsys):
    out = tmp_path / "bundle"
    main(["run", str(pond_yaml), "--out", str(out)])
    capsys.readouterr()
    assert main(["report", str(out)]) == EXIT_OK
    assert "pondlet" in capsys.readouterr().out


def test_report_missing_bundle(tmp_path, capsys):
    assert main(["report", str(tmp_path / "nope")]) == EXIT_CONFIG
    assert capsys.readouterr().err.strip()
