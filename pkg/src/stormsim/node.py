"""Sensor-node firmware emulation.

Each node runs the same five-step duty cycle as the field hardware: wake,
download pending instructions, apply them, sample every enabled sensor plus
internal health statistics, transmit the measurement buffer, then sleep until
the next interval. Everything here is pure state-in/state-out; the scheduler
owns the clock and the transport owns the radio.

Measurements live in a bounded FIFO buffer until the server confirms receipt.
A write that reaches the server but loses its confirmation is retransmitted
whole next cycle; the datastore's last-writer-wins semantics collapse the
duplicates, so points land exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Protocol

from .datastore import Command, CommandKind, Point, SeriesKey

BUFFER_CAPACITY = 1024
HEALTH_SENSORS = ("battery_v", "signal_db", "conn_attempts")


class NodeError(ValueError):
    pass


@dataclass(frozen=True)
class SensorBinding:
    sensor_id: str
    element: str
    quantity: str  # depth | flow | rainfall | concentration
    enabled: bool = True


@dataclass
class NodeConfig:
    node_id: str
    sampling_interval_min: float = 15.0
    awake_window_s: float = 10.0
    sensors: tuple[SensorBinding, ...] = ()
    valve_element: Optional[str] = None
    username: str = ""
    password: str = ""
    min_interval_min: float = 3.0
    max_interval_min: float = 15.0

    def __post_init__(self):
        if not self.min_interval_min <= self.sampling_interval_min \
                <= self.max_interval_min:
            raise NodeError(
                f"node {self.node_id}: sampling interval "
                f"{self.sampling_interval_min} outside "
                f"[{self.min_interval_min}, {self.max_interval_min}]")
        if not any(s.enabled for s in self.sensors):
            raise NodeError(f"node {self.node_id}: no enabled sensors")

    @property
    def auth(self) -> tuple[str, str]:
        return (self.username, self.password)


@dataclass
class PowerModel:
    capacity_mah: float = 2000.0
    sleep_current_ma: float = 0.5
    awake_current_ma: float = 120.0
    solar_charge_rate_ma: float = 50.0
    cutoff_voltage: float = 3.2
    # state-of-charge fraction -> volts; single 3.0..4.2 segment by default
    voltage_curve: tuple[tuple[float, float], ...] = ((0.0, 3.0), (1.0, 4.2))

    def voltage_at(self, charge_mah: float) -> float:
        frac = min(1.0, max(0.0, charge_mah / self.capacity_mah))
        curve = self.voltage_curve
        if frac <= curve[0][0]:
            return curve[0][1]
        for (f0, v0), (f1, v1) in zip(curve, curve[1:]):
            if frac <= f1:
                return v0 + (frac - f0) * (v1 - v0) / (f1 - f0)
        return curve[-1][1]


@dataclass
class NodeState:
    node_id: str
    mode: str = "sleeping"  # sleeping | awake
    next_wake_ms: int = 0
    charge_mah: float = 2000.0
    buffer: list[Point] = field(default_factory=list)
    dropped_points: int = 0
    last_command_seq: int = 0
    connection_attempts: int = 0
    failed_connections: int = 0
    signal_db: float = -70.0
    cycles_run: int = 0

    def copy(self) -> "NodeState":
        return replace(self, buffer=list(self.buffer))

    def buffer_point(self, point: Point) -> None:
        if len(self.buffer) >= BUFFER_CAPACITY:
            self.buffer.pop(0)
            self.dropped_points += 1
        self.buffer.append(point)


@dataclass(frozen=True)
class Actuation:
    element: str
    target_opening: float


class Transport(Protocol):
    """Radio round trips as seen from the node. None/False mean no reply
    arrived; the request may or may not have reached the server."""

    def fetch_commands(self, node_id: str,
                       auth: tuple[str, str]) -> Optional[list[Command]]: ...

    def write_points(self, node_id: str, auth: tuple[str, str],
                     points: list[Point]) -> bool: ...

    def ack_command(self, node_id: str, auth: tuple[str, str],
                    command_id: int, outcome: str, detail: Optional[str]) -> bool: ...

    def signal_for(self, node_id: str) -> float: ...


def power_step(model: PowerModel, charge_mah: float, dt_minutes: float,
               mode: str, daylight: bool) -> float:
    """Integrate battery charge over dt; returns new charge, clamped."""
    if dt_minutes <= 0:
        raise NodeError("dt must be positive")
    draw = model.awake_current_ma if mode == "awake" else model.sleep_current_ma
    net = -draw + (model.solar_charge_rate_ma if daylight else 0.0)
    charge = charge_mah + net * dt_minutes / 60.0
    return min(model.capacity_mah, max(0.0, charge))


def apply_command(
    state: NodeState, config: NodeConfig, command: Command,
) -> tuple[NodeState, NodeConfig, Optional[Actuation], str, Optional[str]]:
    """Apply one command; returns (state, config, actuation, outcome, detail).

    Outcome is the ack verdict: "acked" or "rejected". Stale sequence
    numbers (already seen) are no-ops acked as duplicates.
    """
    state = state.copy()
    if command.id <= state.last_command_seq:
        return state, config, None, "acked", "duplicate"
    state.last_command_seq = command.id

    if command.kind is CommandKind.SET_VALVE:
        if config.valve_element is None:
            return state, config, None, "rejected", "node has no valve"
        target = float(command.payload)
        detail = None
        if target < 0.0 or target > 1.0:
            detail = f"target {target} clamped to [0,1]"
            target = min(1.0, max(0.0, target))
        return state, config, Actuation(config.valve_element, target), \
            "acked", detail

    if command.kind is CommandKind.SET_SAMPLING_INTERVAL:
        interval = float(command.payload)
        detail = None
        clamped = min(config.max_interval_min,
                      max(config.min_interval_min, interval))
        if clamped != interval:
            detail = f"interval {interval} clamped to {clamped}"
        config = replace(config, sampling_interval_min=clamped)
        return state, config, None, "acked", detail

    if command.kind is CommandKind.SET_SENSOR_ENABLED:
        sensor_id = command.payload.get("sensor_id")
        enabled = bool(command.payload.get("enabled"))
        bindings = list(config.sensors)
        for i, binding in enumerate(bindings):
            if binding.sensor_id == sensor_id:
                bindings[i] = replace(binding, enabled=enabled)
                if not any(b.enabled for b in bindings):
                    return state, config, None, "rejected", \
                        "would disable last sensor"
                config = replace(config, sensors=tuple(bindings))
                return state, config, None, "acked", None
        return state, config, None, "rejected", f"no sensor {sensor_id!r}"

    return state, config, None, "rejected", f"unknown kind {command.kind}"


def _latest_per_kind(commands: list[Command]) -> tuple[list[Command], list[Command]]:
    """Split into (to_apply, superseded); highest id per kind wins."""
    by_kind: dict[CommandKind, Command] = {}
    for cmd in sorted(commands, key=lambda c: c.id):
        by_kind[cmd.kind] = cmd
    winners = {cmd.id for cmd in by_kind.values()}
    to_apply = [c for c in sorted(commands, key=lambda c: c.id)
                if c.id in winners]
    superseded = [c for c in sorted(commands, key=lambda c: c.id)
                  if c.id not in winners]
    return to_apply, superseded


def wake_cycle(
    state: NodeState, config: NodeConfig, now_ms: int, power: PowerModel,
    transport: Transport, observe_fn, daylight: bool = False,
) -> tuple[NodeState, NodeConfig, list[Point], list[Actuation]]:
    """Run one full duty cycle; returns (state, config, confirmed points,
    actuations).

    Confirmed points are those the server acknowledged receiving this cycle;
    on transmit failure they stay buffered and the list is empty.
    """
    if now_ms < state.next_wake_ms:
        raise NodeError("woke before schedule")
    state = state.copy()

    if power.voltage_at(state.charge_mah) < power.cutoff_voltage:
        # brown-out: no radio, no sampling; the RTC still reschedules so the
        # node comes back once solar has lifted the pack above cutoff
        state.next_wake_ms = now_ms + int(config.sampling_interval_min * 60_000)
        return state, config, [], []

    state.mode = "awake"
    state.cycles_run += 1
    state.signal_db = transport.signal_for(config.node_id)
    actions: list[Actuation] = []

    # i. download pending instructions (one retry per cycle)
    commands = None
    for _ in range(2):
        state.connection_attempts += 1
        commands = transport.fetch_commands(config.node_id, config.auth)
        if commands is not None:
            break
        state.failed_connections += 1

    # ii. apply them, newest per kind; ack superseded so they stop redelivering
    if commands:
        to_apply, superseded = _latest_per_kind(commands)
        for cmd in superseded:
            state.last_command_seq = max(state.last_command_seq, cmd.id)
            transport.ack_command(config.node_id, config.auth, cmd.id,
                                  "acked", "superseded")
        for cmd in to_apply:
            state, config, actuation, outcome, detail = apply_command(
                state, config, cmd)
            if actuation is not None:
                actions.append(actuation)
            transport.ack_command(config.node_id, config.auth, cmd.id,
                                  outcome, detail)

    # iii. sample enabled sensors, then health statistics
    for binding in config.sensors:
        if not binding.enabled:
            continue
        value = observe_fn(binding.element, binding.quantity)
        state.buffer_point(Point(
            SeriesKey(binding.sensor_id, config.node_id), now_ms, float(value)))
    health = {
        "battery_v": power.voltage_at(state.charge_mah),
        "signal_db": state.signal_db,
        "conn_attempts": float(state.connection_attempts),
    }
    for sensor_id, value in health.items():
        state.buffer_point(Point(
            SeriesKey(sensor_id, config.node_id), now_ms, value))

    # iv. transmit the whole buffer; it is cleared only on confirmation
    confirmed: list[Point] = []
    if state.buffer:
        delivered = False
        for _ in range(2):
            state.connection_attempts += 1
            if transport.write_points(config.node_id, config.auth,
                                      list(state.buffer)):
                delivered = True
                break
            state.failed_connections += 1
        if delivered:
            confirmed = list(state.buffer)
            state.buffer.clear()

    # v. sleep
    state.charge_mah = power_step(
        power, state.charge_mah, config.awake_window_s / 60.0, "awake",
        daylight=daylight)
    state.mode = "sleeping"
    state.next_wake_ms = now_ms + int(config.sampling_interval_min * 60_000)
    return state, config, confirmed, actions
