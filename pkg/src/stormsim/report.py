"""Run metrics and the report bundle.

A bundle is a directory: manifest, metrics, per-series CSVs (one per stored
telemetry series plus the ground-truth traces), and the alert/command logs
as JSON lines. Everything written here is a pure function of (scenario,
seed), so two runs of the same pair produce byte-identical bundles; nothing
wall-clock-dependent may enter these files.

Timing metrics are read from the ground truth rather than the telemetry so
they do not smear with sampling cadence: the sequencing numbers answer
"when did the water actually move", not "when did we notice".
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Optional

from .hydro import OUTLET
from .ingest import ReferenceGauge, load_reference_gauge, validate_against_reference
from .runner import RunResult
from .scenario import MS_PER_MIN

SCHEMA_VERSION = 1

# a unit is "back to pre-storm volume" inside this band
RETENTION_BAND_FRACTION = 0.05
RETENTION_BAND_FLOOR_L = 1000.0

# a rise must persist this many consecutive steps to count as a trend,
# so one-step numerical wiggles cannot fake an arrival
TREND_STEPS = 3


def _first_sustained_rise(stamps: list[float], values: list[float],
                          after_ms: float) -> Optional[int]:
    run = 0
    for i in range(1, len(values)):
        if stamps[i] <= after_ms:
            continue
        if values[i] > values[i - 1] + 1e-9:
            run += 1
            if run >= TREND_STEPS:
                return int(stamps[i - run + 1])  # first step of the trend
        else:
            run = 0
    return None


def _first_drop(stamps: list[float], values: list[float],
                after_ms: float) -> Optional[int]:
    for i in range(1, len(values)):
        if stamps[i] <= after_ms:
            continue
        if values[i] < values[i - 1] - 1e-9:
            return int(stamps[i])
    return None


def _units_of_kind(result: RunResult, kind: str) -> list[str]:
    return [uid for uid, unit in result.graph.storages.items()
            if unit.kind == kind]


def _value_at(stamps: list[float], values: list[float],
              t_ms: float) -> float:
    """Truth value at the last recorded step <= t_ms."""
    best = values[0]
    for t, v in zip(stamps, values):
        if t > t_ms:
            break
        best = v
    return best


def _retention_hours(stamps: list[float], volumes: list[float],
                     rain_start_ms: float,
                     rain_end_ms: float) -> Optional[float]:
    v0 = _value_at(stamps, volumes, rain_start_ms)
    band = max(RETENTION_BAND_FRACTION * v0, RETENTION_BAND_FLOOR_L)
    seen_excursion = False
    for t, v in zip(stamps, volumes):
        if t < rain_end_ms:
            continue
        if abs(v - v0) > band:
            seen_excursion = True
        elif seen_excursion or t > rain_end_ms:
            return (t - rain_end_ms) / 3600_000.0
    return None  # still holding water at the end of the run


def compute_metrics(result: RunResult) -> dict[str, Any]:
    truth = result.truth
    stamps = truth["timestamp_ms"]
    outlet = truth["outlet_flow_cms"]
    scenario = result.scenario

    peak = max(outlet)
    peak_at = int(stamps[outlet.index(peak)])
    metrics: dict[str, Any] = {
        "scenario": scenario.name,
        "seed": result.seed,
        "control": result.control,
        "duration_hours": scenario.duration_hours,
        "peak_outlet_flow_cms": peak,
        "peak_outlet_flow_at_ms": peak_at,
        "total_outlet_volume_l": truth["outlet_cumulative_l"][-1],
        "mass_error_relative": result.final_state.mass_error_relative(),
        "points_stored": sum(
            len(result.store.query_range(key, 0, 2 ** 62))
            for key in result.store.list_series()),
        "alerts_total": len(result.store.alerts_since(0)),
        "commands_total": len(result.store.all_commands()),
        "commands_acked": sum(
            1 for c in result.store.all_commands()
            if c.state.value == "acked"),
    }
    if result.graph.sediment is not None:
        metrics["peak_sediment_mg_l"] = result.graph.sediment.concentration(peak)

    overflow: dict[str, float] = {}
    for uid in result.graph.storages:
        overflow[uid] = truth[f"overflow_l__{uid}"][-1]
    metrics["overflow_volume_l"] = overflow
    metrics["overflow_total_l"] = sum(overflow.values())

    rain_start_min, rain_end_min = scenario.rain.rain_window_min()
    if rain_start_min is not None:
        rain_start_ms = scenario.start_ms + rain_start_min * MS_PER_MIN
        rain_end_min = (rain_end_min if rain_end_min is not None
                        else scenario.duration_hours * 60.0)
        rain_end_ms = scenario.start_ms + rain_end_min * MS_PER_MIN
        metrics["rain_start_ms"] = int(rain_start_ms)
        metrics["rain_end_ms"] = int(rain_end_ms)
        retention: dict[str, Optional[float]] = {}
        for uid in result.graph.storages:
            retention[uid] = _retention_hours(
                stamps, truth[f"volume_l__{uid}"], rain_start_ms, rain_end_ms)
        metrics["retention_hours"] = retention

    # hold-then-release sequencing, read off the first pond and wetland
    ponds = _units_of_kind(result, "pond")
    wetlands = _units_of_kind(result, "wetland")
    if ponds and rain_start_min is not None:
        pond_vol = truth[f"volume_l__{ponds[0]}"]
        release_at = _first_drop(stamps, pond_vol, metrics["rain_end_ms"])
        metrics["release_start_ms"] = release_at
        if release_at is not None:
            # the release ends when the pond is back at its pre-storm volume;
            # outlet discharge over that window is what the gauge "registers
            # over the course of the release"
            v0 = _value_at(stamps, pond_vol, metrics["rain_start_ms"])
            band = max(RETENTION_BAND_FRACTION * v0, RETENTION_BAND_FLOOR_L)
            release_end = int(stamps[-1])
            for t, v in zip(stamps, pond_vol):
                if t > release_at and abs(v - v0) <= band:
                    release_end = int(t)
                    break
            metrics["release_end_ms"] = release_end
            metrics["cumulative_release_volume_l"] = (
                _value_at(stamps, truth["outlet_cumulative_l"], release_end)
                - _value_at(stamps, truth["outlet_cumulative_l"], release_at))
            if wetlands:
                wet_vol = truth[f"volume_l__{wetlands[0]}"]
                wet_rise = _first_sustained_rise(stamps, wet_vol, release_at)
                metrics["wetland_rise_ms"] = wet_rise
                if wet_rise is not None:
                    metrics["pond_to_wetland_lag_min"] = (
                        (wet_rise - release_at) / MS_PER_MIN)
                    out_rise = _first_sustained_rise(stamps, outlet, wet_rise)
                    metrics["outlet_rise_ms"] = out_rise
                    if out_rise is not None:
                        metrics["wetland_to_outlet_lag_min"] = (
                            (out_rise - wet_rise) / MS_PER_MIN)

    if scenario.reference_gauge is not None:
        gauge = load_reference_gauge(scenario.reference_gauge["path"],
                                     scenario.reference_gauge["station_id"])
        metrics["gauge_validation"] = validate_gauge(result, gauge)
        metrics["gauge_station"] = gauge.station_id

    return metrics


def validate_gauge(result: RunResult,
                   gauge: ReferenceGauge) -> dict[str, float]:
    simulated = [(int(t), v) for t, v in zip(result.truth["timestamp_ms"],
                                             result.truth["outlet_flow_cms"])]
    return validate_against_reference(simulated, gauge)


def evaluate_checks(metrics: dict[str, Any],
                    checks: list[dict[str, Any]]) -> list[dict[str, Any]]:
    """Scenario-embedded assertions against the metrics; dotted paths."""
    ops = {
        "<=": lambda a, b: a <= b,
        ">=": lambda a, b: a >= b,
        "<": lambda a, b: a < b,
        ">": lambda a, b: a > b,
        "==": lambda a, b: a == b,
    }
    results = []
    for check in checks:
        path = str(check["metric"])
        node: Any = metrics
        ok = True
        for part in path.split("."):
            if isinstance(node, dict) and part in node:
                node = node[part]
            else:
                node, ok = None, False
                break
        passed = False
        if ok and node is not None:
            passed = ops[check["op"]](node, check["value"])
        results.append({"metric": path, "op": check["op"],
                        "value": check["value"], "actual": node,
                        "passed": passed})
    return results


# bundle ---------------------------------------------------------------------


def _dump_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _csv_lines(rows: list[tuple[int, float]]) -> str:
    out = ["timestamp_ms,value"]
    out.extend(f"{t},{repr(v)}" for t, v in rows)
    return "\n".join(out) + "\n"


def write_bundle(result: RunResult, out_dir: str | Path,
                 metrics: Optional[dict[str, Any]] = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if metrics is None:
        metrics = compute_metrics(result)

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "scenario": result.scenario.name,
        "seed": result.seed,
        "control": result.control,
        "config_hash": result.scenario.config_hash(),
        "start_ms": result.scenario.start_ms,
        "duration_hours": result.scenario.duration_hours,
    }
    (out / "manifest.json").write_text(_dump_json(manifest), encoding="utf-8")
    (out / "metrics.json").write_text(_dump_json(metrics), encoding="utf-8")

    series_dir = out / "series"
    series_dir.mkdir(exist_ok=True)
    for key in sorted(result.store.list_series()):
        points = result.store.query_range(key, 0, 2 ** 62)
        rows = [(p.timestamp_ms, p.value) for p in points]
        name = f"{key.sensor_id}__{key.node_id}.csv"
        (series_dir / name).write_text(_csv_lines(rows), encoding="utf-8")

    truth_dir = out / "truth"
    truth_dir.mkdir(exist_ok=True)
    stamps = [int(t) for t in result.truth["timestamp_ms"]]
    for name in sorted(result.truth):
        if name == "timestamp_ms":
            continue
        rows = list(zip(stamps, result.truth[name]))
        (truth_dir / f"{name}.csv").write_text(_csv_lines(rows),
                                               encoding="utf-8")

    with (out / "alerts.jsonl").open("w", encoding="utf-8") as fh:
        for alert in result.store.alerts_since(0):
            fh.write(json.dumps({
                "fired_at": alert.fired_at, "severity": alert.severity,
                "subject": alert.subject, "message": alert.message,
            }, sort_keys=True) + "\n")

    with (out / "commands.jsonl").open("w", encoding="utf-8") as fh:
        for cmd in result.store.all_commands():
            fh.write(json.dumps({
                "id": cmd.id, "node_id": cmd.node_id,
                "kind": cmd.kind.value, "payload": cmd.payload,
                "issued_at": cmd.issued_at, "state": cmd.state.value,
                "delivered_at": cmd.delivered_at,
                "resolved_at": cmd.resolved_at, "detail": cmd.detail,
            }, sort_keys=True) + "\n")

    with (out / "actuations.jsonl").open("w", encoding="utf-8") as fh:
        for act in result.actuations:
            fh.write(json.dumps({
                "at_ms": act.at_ms, "node_id": act.node_id,
                "element": act.element,
                "target_opening": act.target_opening,
            }, sort_keys=True) + "\n")

    return out


def bundle_digest(bundle_dir: str | Path) -> str:
    """sha256 over every file (path + bytes), order-independent layout."""
    root = Path(bundle_dir)
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(str(path.relative_to(root)).encode())
        digest.update(b"\x00")
        digest.update(path.read_bytes())
        digest.update(b"\x00")
    return digest.hexdigest()


def read_bundle(bundle_dir: str | Path) -> dict[str, Any]:
    root = Path(bundle_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"{root}: not a report bundle (no manifest)")
    return {
        "manifest": json.loads(manifest_path.read_text(encoding="utf-8")),
        "metrics": json.loads((root / "metrics.json").read_text(
            encoding="utf-8")),
    }


def format_summary(bundle: dict[str, Any]) -> str:
    """Human-readable digest of a bundle for the terminal."""
    manifest, metrics = bundle["manifest"], bundle["metrics"]
    lines = [
        f"scenario      {manifest['scenario']}"
        f" (seed {manifest['seed']},"
        f" {'controlled' if manifest['control'] else 'uncontrolled'})",
        f"config hash   {manifest['config_hash'][:16]}",
        f"duration      {manifest['duration_hours']} h",
        f"peak outflow  {metrics['peak_outlet_flow_cms']:.4f} m3/s",
        f"total volume  {metrics['total_outlet_volume_l'] / 1e6:.2f} ML",
        f"mass error    {metrics['mass_error_relative']:.2e}",
    ]
    if "peak_sediment_mg_l" in metrics:
        lines.append(f"peak sediment {metrics['peak_sediment_mg_l']:.1f} mg/L")
    if "cumulative_release_volume_l" in metrics:
        lines.append("release vol   "
                     f"{metrics['cumulative_release_volume_l'] / 1e6:.2f} ML")
    for uid, hours in (metrics.get("retention_hours") or {}).items():
        shown = "not drained" if hours is None else f"{hours:.1f} h"
        lines.append(f"retention     {uid}: {shown}")
    for uid, liters in (metrics.get("overflow_volume_l") or {}).items():
        lines.append(f"overflow      {uid}: {liters / 1e6:.3f} ML")
    if "pond_to_wetland_lag_min" in metrics:
        lines.append("lag           pond->wetland "
                     f"{metrics['pond_to_wetland_lag_min']:.0f} min")
    if "wetland_to_outlet_lag_min" in metrics:
        lines.append("lag           wetland->outlet "
                     f"{metrics['wetland_to_outlet_lag_min']:.0f} min")
    if "gauge_validation" in metrics:
        gv = metrics["gauge_validation"]
        lines.append(f"gauge         {metrics['gauge_station']}: "
                     f"rmse {gv['rmse']:.4f}, "
                     f"peak {gv['peak_error']:+.3f}, "
                     f"volume {gv['volume_error']:+.3f}")
    lines.append(f"alerts        {metrics['alerts_total']}")
    lines.append(f"commands      {metrics['commands_total']} issued, "
                 f"{metrics['commands_acked']} acked")
    return "\n".join(lines)
