"""Closed-loop runs: one scenario stepped on the virtual clock.

The simulation owns four event families on the loop, in tiebreak order:
hydro steps first (so wakes at the same timestamp sample fresh water state),
then link deliveries, node wakes, and subscription ticks. Node radio traffic
goes through the wire codec and the faulty link model both ways, so a lossy
scenario loses exactly what the link drops and nothing else.

Uncontrolled runs answer "what would the water have done without us": every
valve is pinned fully open and command-issuing subscriptions are left out,
while monitoring (sampling, alerts, derived series) still runs.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from .datastore import Command, DataStore, Point, SeriesKey
from .engine import EventLoop, Priority
from .hydro import OUTLET, HydroState, WatershedGraph, observe, step_watershed
from .ingest import ingest_forecast
from .node import NodeConfig, NodeState, PowerModel, power_step, wake_cycle
from .scenario import MS_PER_MIN, NodeSpec, ScenarioConfig
from .subscriptions import (
    AdaptiveSampling,
    PidValveControl,
    SetpointRelease,
    Subscription,
    evaluate,
)
from .telemetry import (
    DROPPED,
    CredentialRegistry,
    LinkModel,
    MessageKind,
    WireMessage,
    authenticate,
    decode_points,
    encode_points,
    link_transmit,
)

SUBSCRIPTION_TICK_MS = 60_000
WAKE_STAGGER_MS = 1_000  # nodes join the schedule one second apart

_TRIGGER_KINDS = (AdaptiveSampling, SetpointRelease, PidValveControl)


@dataclass(frozen=True)
class ActuationEvent:
    at_ms: int
    node_id: str
    element: str
    target_opening: float


class SimTransport:
    """Node radio backed by the link model and the in-process datastore.

    Each RPC is a synchronous round trip: the request rolls the link once,
    the reply rolls it again. A drop in either direction looks identical to
    the node (no reply), which is exactly the ambiguity the firmware's
    retransmit-and-dedup logic exists to survive.
    """

    def __init__(self, store: DataStore, link: LinkModel,
                 registry: CredentialRegistry, rng: random.Random,
                 clock: Callable[[], int]):
        self.store = store
        self.link = link
        self.registry = registry
        self.rng = rng
        self.clock = clock

    def _roundtrip(self, request: WireMessage,
                   serve: Callable[[int], WireMessage]) -> Optional[WireMessage]:
        up = link_transmit(request, self.link, self.rng, self.clock())
        if up is DROPPED:
            return None
        if not authenticate(request, self.registry):
            reply = WireMessage(MessageKind.AUTH_ERROR, request.node_id)
        else:
            reply = serve(up.at)
        down = link_transmit(reply, self.link, self.rng, up.at)
        if down is DROPPED:
            return None
        return reply

    def signal_for(self, node_id: str) -> float:
        return self.link.signal_for(node_id)

    def fetch_commands(self, node_id: str,
                       auth: tuple[str, str]) -> Optional[list[Command]]:
        request = WireMessage(MessageKind.FETCH_COMMANDS, node_id, auth=auth)

        def serve(at_ms: int) -> WireMessage:
            pending = self.store.fetch_pending(node_id, at_ms)
            return WireMessage(MessageKind.COMMAND_LIST, node_id,
                               commands=pending)

        reply = self._roundtrip(request, serve)
        if reply is None or reply.kind is MessageKind.AUTH_ERROR:
            return None
        return reply.commands

    def write_points(self, node_id: str, auth: tuple[str, str],
                     points: list[Point]) -> bool:
        request = WireMessage(MessageKind.WRITE_POINTS, node_id, auth=auth,
                              points=points)

        def serve(at_ms: int) -> WireMessage:
            # through the real codec, so the stored series saw wire format
            decoded = decode_points(encode_points(points))
            result = self.store.write_points(decoded)
            return WireMessage(MessageKind.WRITE_ACK, node_id,
                               written=result.written)

        reply = self._roundtrip(request, serve)
        return reply is not None and reply.kind is MessageKind.WRITE_ACK

    def ack_command(self, node_id: str, auth: tuple[str, str],
                    command_id: int, outcome: str,
                    detail: Optional[str]) -> bool:
        request = WireMessage(MessageKind.ACK_COMMAND, node_id, auth=auth,
                              command_id=command_id, outcome=outcome,
                              detail=detail)

        def serve(at_ms: int) -> WireMessage:
            self.store.ack(node_id, command_id, outcome, at_ms, detail)
            return WireMessage(MessageKind.WRITE_ACK, node_id)

        reply = self._roundtrip(request, serve)
        return reply is not None and reply.kind is MessageKind.WRITE_ACK


@dataclass
class NodeRuntime:
    spec: NodeSpec
    state: NodeState
    config: NodeConfig
    power: PowerModel
    last_power_ms: int


@dataclass
class RunResult:
    scenario: ScenarioConfig
    seed: int
    control: bool
    store: DataStore
    truth: dict[str, list[float]]
    actuations: list[ActuationEvent]
    final_state: HydroState
    graph: WatershedGraph
    nodes: dict[str, "NodeRuntime"]
    events_processed: int = 0

    def truth_series(self, name: str) -> list[tuple[int, float]]:
        stamps = self.truth["timestamp_ms"]
        values = self.truth[name]
        return [(int(t), v) for t, v in zip(stamps, values)]


class Simulation:
    def __init__(self, scenario: ScenarioConfig, seed: Optional[int] = None,
                 control: Optional[bool] = None,
                 log_path: Optional[str] = None,
                 store: Optional[DataStore] = None):
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        self.control = scenario.control if control is None else control
        self.rng = random.Random(self.seed)
        self.loop = EventLoop(start_ms=scenario.start_ms)
        self.store = store if store is not None else DataStore(log_path=log_path)
        self.graph = scenario.build_graph()
        self.link = scenario.build_link()
        if not self.control:
            for unit in self.graph.storages.values():
                unit.outlet.initial_opening = 1.0
        self.hydro = HydroState.initial(self.graph)
        self.registry = CredentialRegistry(
            {spec.config.username: spec.config.password
             for spec in scenario.node_specs.values()})
        self.transport = SimTransport(self.store, self.link, self.registry,
                                      self.rng, lambda: self.loop.now)
        self.subscriptions: list[Subscription] = [
            s for s in scenario.build_subscriptions()
            if self.control or not isinstance(s, _TRIGGER_KINDS)]
        self.nodes: dict[str, NodeRuntime] = {}
        self.actuations: list[ActuationEvent] = []
        self.truth: dict[str, list[float]] = {}
        self._started = False

    # wiring ---------------------------------------------------------------

    def _setup(self) -> None:
        start = self.scenario.start_ms
        if self.scenario.forecast:
            ingest_forecast(self.scenario.forecast, self.store)
        for i, (node_id, spec) in enumerate(self.scenario.node_specs.items()):
            first_wake = start + i * WAKE_STAGGER_MS
            self.nodes[node_id] = NodeRuntime(
                spec=spec,
                state=NodeState(
                    node_id=node_id, next_wake_ms=first_wake,
                    charge_mah=spec.initial_charge_mah,
                    signal_db=self.link.signal_for(node_id)),
                config=spec.config,
                power=spec.power,
                last_power_ms=start)
            self.store.set_redelivery_timeout(
                node_id, int(2 * spec.config.sampling_interval_min * MS_PER_MIN))
            self.loop.schedule(first_wake, Priority.NODE_WAKE,
                               lambda nid=node_id: self._wake(nid))
        dt_ms = int(self.scenario.hydro_dt_min * MS_PER_MIN)
        self.loop.schedule(start + dt_ms, Priority.HYDRO_STEP,
                           self._hydro_step)
        if self.subscriptions:
            self.loop.schedule(start + SUBSCRIPTION_TICK_MS,
                               Priority.SUBSCRIPTION, self._subscription_tick)
        self._record_truth(start)

    def _hydro_step(self) -> None:
        now = self.loop.now
        start = self.scenario.start_ms
        dt_min = self.scenario.hydro_dt_min
        minute = (now - start) / MS_PER_MIN - dt_min  # interval start
        rain = {cid: self.scenario.rain.intensity_at(cid, minute)
                for cid in self.graph.catchments}
        self.hydro, _ = step_watershed(self.graph, self.hydro, rain, dt_min)
        self._record_truth(now)
        next_at = now + int(dt_min * MS_PER_MIN)
        if next_at <= self.scenario.end_ms():
            self.loop.schedule(next_at, Priority.HYDRO_STEP, self._hydro_step)

    def _wake(self, node_id: str) -> None:
        rt = self.nodes[node_id]
        now = self.loop.now
        daylight = self.scenario.is_daylight(now)
        sleep_min = (now - rt.last_power_ms) / MS_PER_MIN
        if sleep_min > 0:
            rt.state.charge_mah = power_step(
                rt.power, rt.state.charge_mah, sleep_min, "sleeping", daylight)
        rt.last_power_ms = now
        state, config, _confirmed, actions = wake_cycle(
            rt.state, rt.config, now, rt.power, self.transport,
            self._observe, daylight=daylight)
        rt.state, rt.config = state, config
        for action in actions:
            self.hydro.unit_target_opening[action.element] = \
                action.target_opening
            self.actuations.append(ActuationEvent(
                at_ms=now, node_id=node_id, element=action.element,
                target_opening=action.target_opening))
        if state.next_wake_ms <= self.scenario.end_ms():
            self.loop.schedule(state.next_wake_ms, Priority.NODE_WAKE,
                               lambda nid=node_id: self._wake(nid))

    def _observe(self, element: str, quantity: str) -> float:
        return observe(self.graph, self.hydro, element, quantity)

    def _subscription_tick(self) -> None:
        now = self.loop.now
        intervals = {nid: rt.config.sampling_interval_min
                     for nid, rt in self.nodes.items()}
        evaluate(self.subscriptions, self.store, now, node_intervals=intervals)
        next_at = now + SUBSCRIPTION_TICK_MS
        if next_at <= self.scenario.end_ms():
            self.loop.schedule(next_at, Priority.SUBSCRIPTION,
                               self._subscription_tick)

    # truth recording --------------------------------------------------------

    def _record_truth(self, now_ms: int) -> None:
        state = self.hydro
        row: dict[str, float] = {
            "timestamp_ms": float(now_ms),
            "outlet_flow_cms": state.last_flows_cms.get(OUTLET, 0.0),
            "outlet_cumulative_l": state.outflow_total_l,
        }
        if self.graph.sediment is not None:
            row["sediment_mg_l"] = self.graph.sediment.concentration(
                row["outlet_flow_cms"])
        for uid, unit in self.graph.storages.items():
            volume = state.unit_volume_l[uid]
            row[f"volume_l__{uid}"] = volume
            row[f"depth_m__{uid}"] = unit.stage_storage.depth_at(volume)
            row[f"opening__{uid}"] = state.unit_opening[uid]
            row[f"overflow_l__{uid}"] = state.unit_overflow_l.get(uid, 0.0)
        for rid in self.graph.reaches:
            row[f"flow_cms__{rid}"] = state.last_flows_cms.get(rid, 0.0)
        for cid in self.graph.catchments:
            row[f"rain_mmh__{cid}"] = state.last_rain_mm_h.get(cid, 0.0)
        if not self.truth:
            self.truth = {name: [] for name in row}
        for name, value in row.items():
            self.truth[name].append(value)

    # run ---------------------------------------------------------------------

    def run(self, pacer=None) -> RunResult:
        if self._started:
            raise RuntimeError("a Simulation object runs once")
        self._started = True
        self._setup()
        processed = self.loop.run(self.scenario.end_ms(), pacer=pacer)
        return RunResult(
            scenario=self.scenario, seed=self.seed, control=self.control,
            store=self.store, truth=self.truth, actuations=self.actuations,
            final_state=self.hydro, graph=self.graph, nodes=self.nodes,
            events_processed=processed)


def run_scenario(scenario: ScenarioConfig, seed: Optional[int] = None,
                 control: Optional[bool] = None,
                 log_path: Optional[str] = None, pacer=None,
                 store: Optional[DataStore] = None) -> RunResult:
    sim = Simulation(scenario, seed=seed, control=control, log_path=log_path,
                     store=store)
    return sim.run(pacer=pacer)
