"""Scenario files: schema, validation, and per-run object construction.

A scenario is one YAML document describing the watershed graph, the node
fleet, the link model, subscriptions, the rainfall/forecast scripts and a
calibration block. Loading validates every cross-reference up front (a bad
file must fail before any stepping); the ``build_*`` methods hand out fresh
mutable objects so repeated runs of one loaded scenario cannot bleed state
into each other.

Times inside the file are minutes from scenario start; ``start_time`` anchors
them to epoch milliseconds.
"""

from __future__ import annotations

import bisect
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .datastore import SeriesKey
from .hydro import (
    Catchment,
    ConfigError,
    Reach,
    SedimentModel,
    StageStorage,
    StorageUnit,
    ValveOutlet,
    WatershedGraph,
    Weir,
)
from .ingest import ForecastRecord, _parse_timestamp
from .node import HEALTH_SENSORS, NodeConfig, PowerModel, SensorBinding
from .subscriptions import (
    AdaptiveSampling,
    DeadmanAlert,
    PidParams,
    PidValveControl,
    RollingMeanWrite,
    SetpointRelease,
    Subscription,
    ThresholdAlert,
)
from .telemetry import LinkModel

MS_PER_MIN = 60_000


class ScenarioError(ValueError):
    """The scenario file does not load or cross-references fail to resolve."""


@dataclass
class NodeSpec:
    config: NodeConfig
    power: PowerModel
    initial_charge_mah: float
    description: str = ""
    location: tuple[float, float] = (0.0, 0.0)


@dataclass
class RainScript:
    """Per-catchment step functions of intensity, minutes from start."""

    steps: dict[str, list[tuple[float, float]]] = field(default_factory=dict)
    scale: float = 1.0

    def intensity_at(self, catchment_id: str, minute: float) -> float:
        steps = self.steps.get(catchment_id)
        if not steps:
            return 0.0
        times = [t for t, _ in steps]
        i = bisect.bisect_right(times, minute) - 1
        if i < 0:
            return 0.0
        return steps[i][1] * self.scale

    def rain_window_min(self) -> tuple[Optional[float], Optional[float]]:
        """(first minute with rain, first minute after which rain stays 0)."""
        start: Optional[float] = None
        end: Optional[float] = None
        for steps in self.steps.values():
            for i, (t, intensity) in enumerate(steps):
                if intensity > 0:
                    start = t if start is None else min(start, t)
                    if i + 1 < len(steps):
                        end_t = steps[i + 1][0]
                    else:
                        end_t = None  # rains until the end of the run
                    if end_t is not None:
                        end = end_t if end is None else max(end, end_t)
        return start, end


def _require(mapping: dict, key: str, context: str):
    if key not in mapping:
        raise ScenarioError(f"{context}: missing required field {key!r}")
    return mapping[key]


@dataclass
class ScenarioConfig:
    raw: dict[str, Any]
    path: Optional[Path]
    name: str
    start_ms: int
    duration_hours: float
    hydro_dt_min: float
    seed: int
    control: bool
    outlet_id: str
    rain: RainScript
    forecast: list[ForecastRecord]
    node_specs: dict[str, NodeSpec]
    daylight_hours: tuple[float, float]
    checks: list[dict[str, Any]]
    reference_gauge: Optional[dict[str, str]]

    def config_hash(self) -> str:
        canonical = yaml.safe_dump(self.raw, sort_keys=True,
                                   default_flow_style=False)
        return hashlib.sha256(canonical.encode()).hexdigest()

    def end_ms(self) -> int:
        return self.start_ms + int(self.duration_hours * 3600_000)

    def is_daylight(self, now_ms: int) -> bool:
        hour = (now_ms // 3600_000) % 24
        lo, hi = self.daylight_hours
        return lo <= hour < hi

    # fresh mutable objects per run ---------------------------------------

    def build_graph(self) -> WatershedGraph:
        return _build_graph(self.raw, self.outlet_id)

    def build_link(self) -> LinkModel:
        spec = self.raw.get("link") or {}
        windows = []
        for pair in spec.get("outage_windows_min", []):
            lo, hi = float(pair[0]), float(pair[1])
            if hi <= lo:
                raise ScenarioError(f"outage window {pair} is empty")
            windows.append((self.start_ms + int(lo * MS_PER_MIN),
                            self.start_ms + int(hi * MS_PER_MIN)))
        return LinkModel(
            base_latency_ms=int(spec.get("base_latency_ms", 200)),
            latency_jitter_ms=int(spec.get("latency_jitter_ms", 0)),
            loss_probability=float(spec.get("loss_probability", 0.0)),
            outage_windows=windows,
            signal_strength_db=dict(spec.get("signal_strength_db", {})),
        )

    def build_subscriptions(self) -> list[Subscription]:
        return [_build_subscription(raw_sub, i, self.raw)
                for i, raw_sub in enumerate(self.raw.get("subscriptions", []))]


def load_scenario(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ScenarioError(f"scenario file not found: {path}")
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{path}: not valid YAML: {exc}")
    if not isinstance(raw, dict):
        raise ScenarioError(f"{path}: scenario must be a mapping")
    return parse_scenario(raw, path)


def parse_scenario(raw: dict[str, Any],
                   path: Optional[Path] = None) -> ScenarioConfig:
    name = str(_require(raw, "name", "scenario"))
    duration_hours = float(_require(raw, "duration_hours", name))
    if duration_hours <= 0:
        raise ScenarioError(f"{name}: duration must be positive")
    hydro_dt = float(raw.get("hydro_dt_minutes", 1.0))
    if not 0 < hydro_dt <= 1.0:
        # explicit Euler transfer scheme is tuned for minute-scale steps
        raise ScenarioError(f"{name}: hydro_dt_minutes must be in (0, 1]")
    if "seed" not in raw:
        raise ScenarioError(f"{name}: seed is required for replayable runs")
    seed = int(raw["seed"])

    start_ms = 0
    if "start_time" in raw:
        start_ms = _parse_timestamp(str(raw["start_time"]))

    calibration = raw.get("calibration") or {}
    rain = _build_rain(raw, float(calibration.get("storm_scale", 1.0)))

    outlet_id = str(raw.get("outlet_id", "outlet"))
    graph = _build_graph(raw, outlet_id)  # validates wiring
    node_specs = _build_node_specs(raw, graph)
    _validate_subscriptions(raw, node_specs)

    for cid in rain.steps:
        if cid not in graph.catchments:
            raise ScenarioError(f"rain names unknown catchment {cid!r}")

    forecast = _build_forecast(raw, start_ms, path)

    daylight = raw.get("defaults", {}).get("daylight_hours", [7, 19])
    checks = list(raw.get("checks", []))
    for check in checks:
        for key in ("metric", "op", "value"):
            _require(check, key, "checks entry")
        if check["op"] not in ("<=", ">=", "<", ">", "=="):
            raise ScenarioError(f"checks: unknown op {check['op']!r}")
        try:
            # YAML 1.1 reads unsigned exponents ("17.1e6") as strings
            check["value"] = float(check["value"])
        except (TypeError, ValueError):
            raise ScenarioError(f"checks: non-numeric value {check['value']!r}") from None

    gauge = None
    if "reference_gauge" in raw:
        spec = raw["reference_gauge"]
        gauge_path = Path(_require(spec, "path", "reference_gauge"))
        if not gauge_path.is_absolute() and path is not None:
            gauge_path = path.parent / gauge_path
        gauge = {"path": str(gauge_path),
                 "station_id": str(spec.get("station_id", "04174518"))}

    # the calibration block may override operating parameters in place
    if "safe_release_depth_m" in calibration:
        for sub in raw.get("subscriptions", []):
            if sub.get("type") == "setpoint_release":
                sub["safe_release_depth_m"] = calibration["safe_release_depth_m"]
    if "reach_delays" in calibration:
        for rid, minutes in calibration["reach_delays"].items():
            if rid not in (raw.get("reaches") or {}):
                raise ScenarioError(
                    f"calibration.reach_delays: unknown reach {rid!r}")
            raw["reaches"][rid]["pure_delay_minutes"] = minutes

    return ScenarioConfig(
        raw=raw, path=path, name=name, start_ms=start_ms,
        duration_hours=duration_hours, hydro_dt_min=hydro_dt, seed=seed,
        control=bool(raw.get("control", True)), outlet_id=outlet_id,
        rain=rain, forecast=forecast, node_specs=node_specs,
        daylight_hours=(float(daylight[0]), float(daylight[1])),
        checks=checks, reference_gauge=gauge,
    )


def _build_graph(raw: dict, outlet_id: str) -> WatershedGraph:
    graph = WatershedGraph(outlet_id=outlet_id)
    if "sediment" in raw and raw["sediment"] is not None:
        sed = raw["sediment"]
        graph.sediment = SedimentModel(
            c0_mg_l=float(_require(sed, "c0_mg_l", "sediment")),
            slope_mg_l_per_cms=float(
                _require(sed, "slope_mg_l_per_cms", "sediment")))
    try:
        for cid, spec in (raw.get("catchments") or {}).items():
            graph.catchments[cid] = Catchment(
                id=cid,
                area_km2=float(_require(spec, "area_km2", cid)),
                runoff_coefficient=float(
                    _require(spec, "runoff_coefficient", cid)),
                reservoir_k_hours=float(
                    _require(spec, "reservoir_k_hours", cid)),
                downstream=str(_require(spec, "downstream", cid)))
        for uid, spec in (raw.get("storages") or {}).items():
            valve_spec = _require(spec, "valve", uid)
            valve = ValveOutlet(
                diameter_m=float(_require(valve_spec, "diameter_m", uid)),
                discharge_coefficient=float(
                    valve_spec.get("discharge_coefficient", 0.6)),
                initial_opening=float(valve_spec.get("initial_opening", 1.0)),
                travel_rate_per_min=float(
                    valve_spec.get("travel_rate_per_min", 0.10)),
                count=int(valve_spec.get("count", 1)))
            overflow = None
            if spec.get("overflow"):
                o = spec["overflow"]
                overflow = Weir(
                    crest_depth_m=float(_require(o, "crest_depth_m", uid)),
                    coefficient=float(o.get("coefficient", 1.7)),
                    length_m=float(o.get("length_m", 3.0)))
            curve_pts = _require(spec, "stage_storage", uid)
            graph.storages[uid] = StorageUnit(
                id=uid,
                stage_storage=StageStorage(
                    [(float(d), float(v)) for d, v in curve_pts]),
                capacity_l=float(_require(spec, "capacity_l", uid)),
                outlet=valve,
                downstream=str(_require(spec, "downstream", uid)),
                overflow=overflow,
                kind=str(spec.get("kind", "pond")),
                outlet_invert_m=float(spec.get("outlet_invert_m", 0.0)),
                initial_volume_l=float(spec.get("initial_volume_l", 0.0)))
        for rid, spec in (raw.get("reaches") or {}).items():
            graph.reaches[rid] = Reach(
                id=rid,
                pure_delay_minutes=float(
                    _require(spec, "pure_delay_minutes", rid)),
                attenuation_k_hours=float(
                    _require(spec, "attenuation_k_hours", rid)),
                downstream=str(_require(spec, "downstream", rid)),
                rating_coefficient=float(spec.get("rating_coefficient", 0.8)),
                rating_exponent=float(spec.get("rating_exponent", 0.6)))
        graph.validate()
    except ConfigError as exc:
        raise ScenarioError(str(exc)) from exc
    return graph


_QUANTITIES = ("depth", "flow", "rainfall", "concentration")


def _validate_binding(graph: WatershedGraph, element: str, quantity: str,
                      context: str) -> None:
    if quantity not in _QUANTITIES:
        raise ScenarioError(f"{context}: unknown quantity {quantity!r}")
    ids = set(graph.element_ids()) | {graph.outlet_id}
    if element not in ids:
        raise ScenarioError(f"{context}: unknown element {element!r}")
    if quantity == "depth" and element not in graph.storages \
            and element not in graph.reaches:
        raise ScenarioError(f"{context}: depth needs a storage or reach")
    if quantity == "rainfall" and element not in graph.catchments:
        raise ScenarioError(f"{context}: rainfall needs a catchment")
    if quantity == "concentration" and graph.sediment is None:
        raise ScenarioError(f"{context}: no sediment model configured")


def _build_node_specs(raw: dict,
                      graph: WatershedGraph) -> dict[str, NodeSpec]:
    defaults = raw.get("defaults") or {}
    default_power = defaults.get("power") or {}
    min_iv = float(defaults.get("min_interval_min", 3.0))
    max_iv = float(defaults.get("max_interval_min", 15.0))
    specs: dict[str, NodeSpec] = {}
    for node_id, spec in (raw.get("nodes") or {}).items():
        sensors = []
        for s in _require(spec, "sensors", node_id):
            binding = SensorBinding(
                sensor_id=str(_require(s, "sensor_id", node_id)),
                element=str(_require(s, "element", node_id)),
                quantity=str(_require(s, "quantity", node_id)),
                enabled=bool(s.get("enabled", True)))
            _validate_binding(graph, binding.element, binding.quantity,
                              f"node {node_id} sensor {binding.sensor_id}")
            sensors.append(binding)
        valve_element = spec.get("valve_element")
        if valve_element is not None and valve_element not in graph.storages:
            raise ScenarioError(
                f"node {node_id}: valve element {valve_element!r} is not a "
                "storage unit")
        try:
            config = NodeConfig(
                node_id=node_id,
                sampling_interval_min=float(
                    spec.get("sampling_interval_min", 15.0)),
                awake_window_s=float(spec.get("awake_window_s", 10.0)),
                sensors=tuple(sensors),
                valve_element=valve_element,
                username=node_id,
                password=str(_require(spec, "password", node_id)),
                min_interval_min=min_iv,
                max_interval_min=max_iv)
        except ValueError as exc:
            raise ScenarioError(str(exc)) from exc
        power_spec = {**default_power, **(spec.get("power") or {})}
        power = PowerModel(
            capacity_mah=float(power_spec.get("capacity_mah", 2000.0)),
            sleep_current_ma=float(power_spec.get("sleep_current_ma", 0.5)),
            awake_current_ma=float(power_spec.get("awake_current_ma", 120.0)),
            solar_charge_rate_ma=float(
                power_spec.get("solar_charge_rate_ma", 50.0)),
            cutoff_voltage=float(power_spec.get("cutoff_voltage", 3.2)))
        location = spec.get("location", [0.0, 0.0])
        specs[node_id] = NodeSpec(
            config=config, power=power,
            initial_charge_mah=float(
                spec.get("initial_charge_mah", power.capacity_mah)),
            description=str(spec.get("description", "")),
            location=(float(location[0]), float(location[1])))
    return specs


def _known_series(raw_sub_key: str, key: SeriesKey,
                  node_specs: dict[str, NodeSpec]) -> None:
    from .ingest import EXT_NODE

    if key.node_id == EXT_NODE:
        return
    spec = node_specs.get(key.node_id)
    if spec is None:
        raise ScenarioError(
            f"{raw_sub_key}: series {key} names unknown node {key.node_id!r}")
    sensor_ids = {s.sensor_id for s in spec.config.sensors}
    if key.sensor_id not in sensor_ids and key.sensor_id not in HEALTH_SENSORS:
        raise ScenarioError(
            f"{raw_sub_key}: node {key.node_id} has no sensor "
            f"{key.sensor_id!r}")


def _validate_subscriptions(raw: dict,
                            node_specs: dict[str, NodeSpec]) -> None:
    for i, sub in enumerate(raw.get("subscriptions", [])):
        _build_subscription(sub, i, raw)  # shape check
        context = f"subscription {sub.get('id', i)}"
        for series_field in ("series", "wetland_depth_series",
                             "measurement_series", "forecast_series",
                             "source"):
            if series_field in sub:
                _known_series(context, SeriesKey.parse(sub[series_field]),
                              node_specs)
        for node_field in ("node", "valve_node"):
            if node_field in sub and sub[node_field] not in node_specs:
                raise ScenarioError(
                    f"{context}: unknown node {sub[node_field]!r}")
        if "valve_node" in sub:
            if node_specs[sub["valve_node"]].config.valve_element is None:
                raise ScenarioError(
                    f"{context}: node {sub['valve_node']} has no valve")


def _build_subscription(spec: dict, index: int, raw: dict) -> Subscription:
    kind = spec.get("type")
    sub_id = str(spec.get("id", f"sub-{index}"))
    common = {
        "id": sub_id,
        "evaluation_interval_min": float(
            spec.get("evaluation_interval_min", 5.0)),
    }
    if "debounce_window_min" in spec:
        common["debounce_window_min"] = float(spec["debounce_window_min"])
    try:
        if kind == "threshold":
            return ThresholdAlert(
                series=SeriesKey.parse(_require(spec, "series", sub_id)),
                comparator=str(_require(spec, "comparator", sub_id)),
                threshold=float(_require(spec, "threshold", sub_id)),
                severity=str(spec.get("severity", "warning")),
                **common)
        if kind == "deadman":
            return DeadmanAlert(
                node_id=str(_require(spec, "node", sub_id)),
                missed_windows=int(spec.get("missed_windows", 3)),
                **common)
        if kind == "adaptive_sampling":
            return AdaptiveSampling(
                node_id=str(_require(spec, "node", sub_id)),
                forecast_series=SeriesKey.parse(
                    spec.get("forecast_series", "precip_prob,node=ext")),
                rain_probability_threshold=float(
                    spec.get("rain_probability_threshold", 0.5)),
                fast_interval_min=float(spec.get("fast_interval_min", 3.0)),
                slow_interval_min=float(spec.get("slow_interval_min", 15.0)),
                **common)
        if kind == "setpoint_release":
            return SetpointRelease(
                valve_node_id=str(_require(spec, "valve_node", sub_id)),
                wetland_depth_series=SeriesKey.parse(
                    _require(spec, "wetland_depth_series", sub_id)),
                safe_release_depth_m=float(
                    _require(spec, "safe_release_depth_m", sub_id)),
                hysteresis_m=float(spec.get("hysteresis_m", 0.05)),
                release_opening=float(spec.get("release_opening", 1.0)),
                staleness_window_min=float(
                    spec.get("staleness_window_min", 45.0)),
                **common)
        if kind == "pid_valve":
            params = PidParams(
                kp=float(_require(spec, "kp", sub_id)),
                ki=float(spec.get("ki", 0.0)),
                kd=float(spec.get("kd", 0.0)),
                setpoint=float(_require(spec, "setpoint", sub_id)))
            return PidValveControl(
                valve_node_id=str(_require(spec, "valve_node", sub_id)),
                measurement_series=SeriesKey.parse(
                    _require(spec, "measurement_series", sub_id)),
                params=params, **common)
        if kind == "rolling_mean":
            return RollingMeanWrite(
                source=SeriesKey.parse(_require(spec, "source", sub_id)),
                target=SeriesKey.parse(_require(spec, "target", sub_id)),
                window_min=float(spec.get("window_min", 60.0)),
                **common)
    except (ValueError, ScenarioError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(f"subscription {sub_id}: {exc}") from exc
    raise ScenarioError(f"subscription {sub_id}: unknown type {kind!r}")


def _build_rain(raw: dict, scale: float) -> RainScript:
    steps: dict[str, list[tuple[float, float]]] = {}
    for cid, entries in (raw.get("rain") or {}).items():
        parsed = []
        for entry in entries:
            minute, intensity = float(entry[0]), float(entry[1])
            if intensity < 0:
                raise ScenarioError(f"rain for {cid}: negative intensity")
            parsed.append((minute, intensity))
        if parsed != sorted(parsed, key=lambda p: p[0]):
            raise ScenarioError(f"rain for {cid}: minutes must be ascending")
        steps[cid] = parsed
    return RainScript(steps=steps, scale=scale)


def _build_forecast(raw: dict, start_ms: int,
                    path: Optional[Path]) -> list[ForecastRecord]:
    from .ingest import IngestError, parse_forecast_csv

    records: list[ForecastRecord] = []
    if "forecast_csv" in raw:
        csv_path = Path(raw["forecast_csv"])
        if not csv_path.is_absolute() and path is not None:
            csv_path = path.parent / csv_path
        parsed, _ = parse_forecast_csv(csv_path.read_text(encoding="utf-8"))
        records.extend(parsed)
    for entry in raw.get("forecast") or []:
        minute, prob, intensity = entry[0], entry[1], entry[2]
        try:
            records.append(ForecastRecord(
                valid_at_ms=start_ms + int(float(minute) * MS_PER_MIN),
                precip_probability=float(prob),
                intensity_mmh=float(intensity)))
        except IngestError as exc:
            raise ScenarioError(f"forecast entry {entry}: {exc}") from exc
    records.sort(key=lambda r: r.valid_at_ms)
    return records
