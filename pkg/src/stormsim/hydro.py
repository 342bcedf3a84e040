"""Deterministic watershed physics.

Rainfall runs off catchments (linear reservoirs), routes through
valve-controlled storage units and delayed/attenuated reaches to a single
outlet junction, with an affine sediment-concentration proxy on flow.

Units are fixed throughout: storage volumes in liters, flows in m^3/s, depths
in m, rainfall intensity in mm/h, time steps in minutes. Stepping is explicit
Euler with per-step transfers capped at the available storage, so every liter
moved out of one element lands in its downstream element (or the outlet
ledger) and mass balances to float roundoff.

State is an explicit value: ``step_watershed`` copies the incoming state,
advances the copy and returns it, leaving the caller's state untouched.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

GRAVITY = 9.81  # m/s^2
L_PER_M3 = 1000.0


class ConfigError(ValueError):
    """Graph wiring or binding does not resolve."""


class DomainError(ValueError):
    """Physically meaningless input (negative head, opening > 1, ...)."""


def valve_discharge(opening: float, head: float, diameter: float,
                    cd: float) -> float:
    """Orifice flow through a partially open valve, m^3/s.

    Q = opening * cd * (pi d^2 / 4) * sqrt(2 g h). Monotone nondecreasing in
    every argument; zero when closed or under zero head.
    """
    if opening < 0 or head < 0 or diameter < 0 or cd < 0:
        raise DomainError("valve_discharge arguments must be nonnegative")
    if opening > 1:
        raise DomainError("opening must be <= 1")
    area = math.pi * diameter * diameter / 4.0
    return opening * cd * area * math.sqrt(2.0 * GRAVITY * head)


@dataclass(frozen=True)
class SedimentModel:
    """Suspended-sediment proxy: concentration affine in flow, clamped at 0."""

    c0_mg_l: float
    slope_mg_l_per_cms: float

    def concentration(self, flow_cms: float) -> float:
        if flow_cms < 0:
            raise DomainError("flow must be nonnegative")
        return max(0.0, self.c0_mg_l + self.slope_mg_l_per_cms * flow_cms)


def sediment_concentration(model: SedimentModel, flow_cms: float) -> float:
    return model.concentration(flow_cms)


class StageStorage:
    """Piecewise-linear, strictly increasing depth (m) -> volume (L) curve.

    Extrapolates beyond the last knot with the final segment slope so
    transient overfilling still has a defined stage.
    """

    def __init__(self, points: list[tuple[float, float]]):
        if len(points) < 2:
            raise ConfigError("stage_storage needs at least two points")
        for (d0, v0), (d1, v1) in zip(points, points[1:]):
            if d1 <= d0 or v1 <= v0:
                raise ConfigError("stage_storage must be strictly increasing")
        self.points = [(float(d), float(v)) for d, v in points]

    def volume_at(self, depth: float) -> float:
        pts = self.points
        if depth <= pts[0][0]:
            d0, v0 = pts[0]
            d1, v1 = pts[1]
            return max(0.0, v0 + (depth - d0) * (v1 - v0) / (d1 - d0))
        for (d0, v0), (d1, v1) in zip(pts, pts[1:]):
            if depth <= d1:
                return v0 + (depth - d0) * (v1 - v0) / (d1 - d0)
        d0, v0 = pts[-2]
        d1, v1 = pts[-1]
        return v1 + (depth - d1) * (v1 - v0) / (d1 - d0)

    def depth_at(self, volume: float) -> float:
        pts = self.points
        if volume <= pts[0][1]:
            d0, v0 = pts[0]
            d1, v1 = pts[1]
            return max(0.0, d0 + (volume - v0) * (d1 - d0) / (v1 - v0))
        for (d0, v0), (d1, v1) in zip(pts, pts[1:]):
            if volume <= v1:
                return d0 + (volume - v0) * (d1 - d0) / (v1 - v0)
        d0, v0 = pts[-2]
        d1, v1 = pts[-1]
        return d1 + (volume - v1) * (d1 - d0) / (v1 - v0)


@dataclass
class Catchment:
    id: str
    area_km2: float
    runoff_coefficient: float
    reservoir_k_hours: float
    downstream: str

    def __post_init__(self):
        if self.area_km2 <= 0:
            raise ConfigError(f"catchment {self.id}: area must be > 0")
        if not 0.0 <= self.runoff_coefficient <= 1.0:
            raise ConfigError(f"catchment {self.id}: runoff coefficient in [0,1]")
        if self.reservoir_k_hours <= 0:
            raise ConfigError(f"catchment {self.id}: reservoir k must be > 0")


@dataclass
class ValveOutlet:
    diameter_m: float
    discharge_coefficient: float = 0.6
    initial_opening: float = 1.0
    travel_rate_per_min: float = 0.10  # fraction of full travel per minute
    count: int = 1  # parallel identical barrels

    def __post_init__(self):
        if not 0.0 <= self.initial_opening <= 1.0:
            raise ConfigError("valve opening must be in [0,1]")


@dataclass
class Weir:
    crest_depth_m: float
    coefficient: float = 1.7  # rectangular weir, SI
    length_m: float = 3.0

    def flow(self, depth: float) -> float:
        head = depth - self.crest_depth_m
        if head <= 0:
            return 0.0
        return self.coefficient * self.length_m * head ** 1.5


@dataclass
class StorageUnit:
    id: str
    stage_storage: StageStorage
    capacity_l: float
    outlet: ValveOutlet
    downstream: str
    overflow: Optional[Weir] = None
    kind: str = "pond"  # pond | wetland
    outlet_invert_m: float = 0.0  # valve sill; water below it is dead pool
    initial_volume_l: float = 0.0


@dataclass
class Reach:
    id: str
    pure_delay_minutes: float
    attenuation_k_hours: float
    downstream: str
    rating_coefficient: float = 0.8  # stream depth = a * Q^b at the reach
    rating_exponent: float = 0.6

    def __post_init__(self):
        if self.pure_delay_minutes < 0:
            raise ConfigError(f"reach {self.id}: delay must be >= 0")
        if self.attenuation_k_hours <= 0:
            raise ConfigError(f"reach {self.id}: attenuation k must be > 0")

    def depth_for_flow(self, flow_cms: float) -> float:
        if flow_cms <= 0:
            return 0.0
        return self.rating_coefficient * flow_cms ** self.rating_exponent


@dataclass
class WatershedGraph:
    catchments: dict[str, Catchment] = field(default_factory=dict)
    storages: dict[str, StorageUnit] = field(default_factory=dict)
    reaches: dict[str, Reach] = field(default_factory=dict)
    outlet_id: str = "outlet"
    sediment: Optional[SedimentModel] = None

    def element_ids(self) -> list[str]:
        return (list(self.catchments) + list(self.storages) + list(self.reaches))

    def validate(self) -> None:
        ids = set(self.element_ids())
        if self.outlet_id in ids:
            raise ConfigError("outlet id collides with an element id")
        for elem_id in ids:
            elem = (self.catchments.get(elem_id) or self.storages.get(elem_id)
                    or self.reaches.get(elem_id))
            down = elem.downstream
            if down != self.outlet_id and down not in ids:
                raise ConfigError(
                    f"element {elem_id}: downstream {down!r} does not resolve")
            if down in self.catchments:
                raise ConfigError(
                    f"element {elem_id}: catchments cannot receive inflow")


@dataclass
class HydroState:
    """Explicit simulation state; copy-on-step."""

    sim_time_min: float = 0.0
    dt_min: Optional[float] = None  # pinned on first step (delay lines)
    catchment_storage_l: dict[str, float] = field(default_factory=dict)
    unit_volume_l: dict[str, float] = field(default_factory=dict)
    unit_opening: dict[str, float] = field(default_factory=dict)
    unit_target_opening: dict[str, float] = field(default_factory=dict)
    reach_line_l: dict[str, deque] = field(default_factory=dict)
    reach_storage_l: dict[str, float] = field(default_factory=dict)
    unit_overflow_l: dict[str, float] = field(default_factory=dict)
    inflow_total_l: float = 0.0
    outflow_total_l: float = 0.0
    initial_storage_l: float = 0.0
    element_in_l: dict[str, float] = field(default_factory=dict)
    element_out_l: dict[str, float] = field(default_factory=dict)
    last_flows_cms: dict[str, float] = field(default_factory=dict)
    last_rain_mm_h: dict[str, float] = field(default_factory=dict)

    @classmethod
    def initial(cls, graph: WatershedGraph) -> "HydroState":
        state = cls()
        for cid in graph.catchments:
            state.catchment_storage_l[cid] = 0.0
        for uid, unit in graph.storages.items():
            state.unit_volume_l[uid] = unit.initial_volume_l
            state.unit_opening[uid] = unit.outlet.initial_opening
            state.unit_target_opening[uid] = unit.outlet.initial_opening
            state.unit_overflow_l[uid] = 0.0
        for rid in graph.reaches:
            state.reach_line_l[rid] = deque()
            state.reach_storage_l[rid] = 0.0
        for eid in graph.element_ids():
            state.element_in_l[eid] = 0.0
            state.element_out_l[eid] = 0.0
        state.initial_storage_l = state.total_storage_l()
        return state

    def copy(self) -> "HydroState":
        return HydroState(
            sim_time_min=self.sim_time_min,
            dt_min=self.dt_min,
            catchment_storage_l=dict(self.catchment_storage_l),
            unit_volume_l=dict(self.unit_volume_l),
            unit_opening=dict(self.unit_opening),
            unit_target_opening=dict(self.unit_target_opening),
            reach_line_l={k: deque(v) for k, v in self.reach_line_l.items()},
            reach_storage_l=dict(self.reach_storage_l),
            unit_overflow_l=dict(self.unit_overflow_l),
            inflow_total_l=self.inflow_total_l,
            outflow_total_l=self.outflow_total_l,
            initial_storage_l=self.initial_storage_l,
            element_in_l=dict(self.element_in_l),
            element_out_l=dict(self.element_out_l),
            last_flows_cms=dict(self.last_flows_cms),
            last_rain_mm_h=dict(self.last_rain_mm_h),
        )

    def total_storage_l(self) -> float:
        return (sum(self.catchment_storage_l.values())
                + sum(self.unit_volume_l.values())
                + sum(sum(line) for line in self.reach_line_l.values())
                + sum(self.reach_storage_l.values()))

    def mass_error_relative(self) -> float:
        """|in - out - delta storage| relative to total inflow."""
        delta = self.total_storage_l() - self.initial_storage_l
        residual = abs(self.inflow_total_l - self.outflow_total_l - delta)
        return residual / max(self.inflow_total_l, 1.0)


OUTLET = "__outlet__"  # key for the outlet junction in flow maps


def step_watershed(graph: WatershedGraph, state: HydroState,
                   rainfall_mm_h: dict[str, float],
                   dt_minutes: float) -> tuple[HydroState, dict[str, float]]:
    """Advance the watershed one step; returns (new state, outflow map m^3/s).

    The flow map has one entry per element plus ``OUTLET`` for the junction.
    """
    if dt_minutes <= 0:
        raise DomainError("dt must be positive")
    for cid, intensity in rainfall_mm_h.items():
        if cid not in graph.catchments:
            raise ConfigError(f"rainfall names unknown catchment {cid!r}")
        if intensity < 0:
            raise DomainError("rainfall must be nonnegative")

    st = state.copy()
    if st.dt_min is None:
        st.dt_min = dt_minutes
        for rid, reach in graph.reaches.items():
            slots = max(0, round(reach.pure_delay_minutes / dt_minutes))
            st.reach_line_l[rid] = deque([0.0] * slots)
    elif st.dt_min != dt_minutes:
        raise ConfigError("dt changed mid-run; delay lines are dt-specific")

    dt_s = dt_minutes * 60.0

    # valves travel toward their targets before this step's hydraulics
    for uid, unit in graph.storages.items():
        opening = st.unit_opening[uid]
        target = st.unit_target_opening[uid]
        max_move = unit.outlet.travel_rate_per_min * dt_minutes
        # snap when within float noise of arriving, else a fully closed
        # target could leave a ~1e-17 residual opening that leaks forever
        if abs(target - opening) <= max_move * (1.0 + 1e-9):
            opening = target
        elif target > opening:
            opening += max_move
        else:
            opening -= max_move
        st.unit_opening[uid] = min(1.0, max(0.0, opening))

    out_l: dict[str, float] = {}
    rain_in_l: dict[str, float] = {}

    for cid, catchment in graph.catchments.items():
        intensity = rainfall_mm_h.get(cid, 0.0)
        # mm/h over km^2 -> L/s is i*A*(1e6/3600)
        rain_in_l[cid] = (catchment.runoff_coefficient * intensity
                          * catchment.area_km2 * (1e6 / 3600.0) * dt_s)
        storage = st.catchment_storage_l[cid]
        drain = storage * dt_s / (catchment.reservoir_k_hours * 3600.0)
        out_l[cid] = min(storage, drain)

    for uid, unit in graph.storages.items():
        volume = st.unit_volume_l[uid]
        depth = unit.stage_storage.depth_at(volume)
        head = max(0.0, depth - unit.outlet_invert_m)
        q_valve = valve_discharge(
            st.unit_opening[uid], head, unit.outlet.diameter_m,
            unit.outlet.discharge_coefficient) * unit.outlet.count
        invert_volume = unit.stage_storage.volume_at(unit.outlet_invert_m)
        available = max(0.0, volume - invert_volume)
        orifice_l = min(available, q_valve * L_PER_M3 * dt_s)
        weir_l = 0.0
        if unit.overflow is not None:
            q_weir = unit.overflow.flow(depth)
            crest_volume = unit.stage_storage.volume_at(unit.overflow.crest_depth_m)
            above_crest = max(0.0, volume - crest_volume)
            weir_l = min(above_crest, q_weir * L_PER_M3 * dt_s)
        out_l[uid] = orifice_l + weir_l
        st.unit_overflow_l[uid] += weir_l
        st.last_flows_cms[uid + "/overflow"] = weir_l / (L_PER_M3 * dt_s)

    for rid, reach in graph.reaches.items():
        storage = st.reach_storage_l[rid]
        drain = storage * dt_s / (reach.attenuation_k_hours * 3600.0)
        out_l[rid] = min(storage, drain)

    # route: every liter leaving an element lands downstream (or at the outlet)
    in_l: dict[str, float] = {eid: 0.0 for eid in graph.element_ids()}
    outlet_in = 0.0
    for eid, volume in out_l.items():
        elem = (graph.catchments.get(eid) or graph.storages.get(eid)
                or graph.reaches.get(eid))
        if elem.downstream == graph.outlet_id:
            outlet_in += volume
        else:
            in_l[elem.downstream] += volume

    for cid in graph.catchments:
        st.catchment_storage_l[cid] += rain_in_l[cid] - out_l[cid]
        st.element_in_l[cid] += rain_in_l[cid]
        st.element_out_l[cid] += out_l[cid]
    for uid in graph.storages:
        st.unit_volume_l[uid] += in_l[uid] - out_l[uid]
        st.element_in_l[uid] += in_l[uid]
        st.element_out_l[uid] += out_l[uid]
    for rid in graph.reaches:
        line = st.reach_line_l[rid]
        line.append(in_l[rid])
        arriving = line.popleft()
        st.reach_storage_l[rid] += arriving - out_l[rid]
        st.element_in_l[rid] += in_l[rid]
        st.element_out_l[rid] += out_l[rid]

    st.inflow_total_l += sum(rain_in_l.values())
    st.outflow_total_l += outlet_in
    st.sim_time_min += dt_minutes

    flows = {eid: out_l[eid] / (L_PER_M3 * dt_s) for eid in out_l}
    flows[OUTLET] = outlet_in / (L_PER_M3 * dt_s)
    for eid, q in flows.items():
        st.last_flows_cms[eid] = q
    st.last_rain_mm_h = dict(rainfall_mm_h)
    return st, flows


def observe(graph: WatershedGraph, state: HydroState, element: str,
            quantity: str) -> float:
    """Read one observable. Pure; raises ConfigError on unknown bindings."""
    if quantity == "depth":
        if element in graph.storages:
            unit = graph.storages[element]
            return unit.stage_storage.depth_at(state.unit_volume_l[element])
        if element in graph.reaches:
            reach = graph.reaches[element]
            return reach.depth_for_flow(state.last_flows_cms.get(element, 0.0))
        raise ConfigError(f"depth not defined for {element!r}")
    if quantity == "flow":
        if element == graph.outlet_id:
            return state.last_flows_cms.get(OUTLET, 0.0)
        if element in graph.catchments or element in graph.storages \
                or element in graph.reaches:
            return state.last_flows_cms.get(element, 0.0)
        raise ConfigError(f"flow not defined for {element!r}")
    if quantity == "rainfall":
        if element in graph.catchments:
            return state.last_rain_mm_h.get(element, 0.0)
        raise ConfigError(f"rainfall not defined for {element!r}")
    if quantity == "concentration":
        if graph.sediment is None:
            raise ConfigError("no sediment model configured")
        if element == graph.outlet_id:
            flow = state.last_flows_cms.get(OUTLET, 0.0)
        elif element in state.last_flows_cms or element in graph.element_ids():
            flow = state.last_flows_cms.get(element, 0.0)
        else:
            raise ConfigError(f"concentration not defined for {element!r}")
        return graph.sediment.concentration(flow)
    raise ConfigError(f"unknown quantity {quantity!r}")
