"""Node firmware behavior: duty cycle, power budget, commands, buffering."""

import pytest

import stormsim.node as node_mod
from stormsim.datastore import Command, CommandKind, SeriesKey
from stormsim.node import (
    Actuation,
    NodeConfig,
    NodeError,
    NodeState,
    PowerModel,
    SensorBinding,
    apply_command,
    power_step,
    wake_cycle,
)

MIN = 60_000  # ms


class FakeTransport:
    """Scripted transport: everything succeeds unless told otherwise."""

    def __init__(self, commands=None, link_up=True, write_ok=True):
        self.commands = list(commands or [])
        self.link_up = link_up
        self.write_ok = write_ok
        self.written: list = []
        self.acks: list = []

    def fetch_commands(self, node_id, auth):
        if not self.link_up:
            return None
        out, self.commands = self.commands, []
        return out

    def write_points(self, node_id, auth, points):
        if not self.link_up or not self.write_ok:
            return False
        self.written.extend(points)
        return True

    def ack_command(self, node_id, auth, command_id, outcome, detail):
        if not self.link_up:
            return False
        self.acks.append((command_id, outcome, detail))
        return True

    def signal_for(self, node_id):
        return -62.0


def _config(**kw):
    defaults = dict(
        node_id="n1",
        sampling_interval_min=15.0,
        sensors=(
            SensorBinding("depth", "pond", "depth"),
            SensorBinding("flow", "creek", "flow"),
        ),
        valve_element="pond",
        username="n1", password="pw",
    )
    defaults.update(kw)
    return NodeConfig(**defaults)


def _state(charge=2000.0):
    return NodeState(node_id="n1", charge_mah=charge)


def _observe(element, quantity):
    return {"depth": 0.8, "flow": 0.25}[quantity]


# -------------------------------------------------------------- power model

def test_awake_draw_oracle():
    # 120 mA for 10 s is 120 * 10/3600 = 0.3333 mAh
    model = PowerModel(capacity_mah=2000, awake_current_ma=120)
    charge = power_step(model, 2000.0, 10 / 60, "awake", daylight=False)
    assert abs((2000.0 - charge) - 0.333333) < 1e-4


def test_sleep_draw_oracle():
    # 0.5 mA for 24 h is 12 mAh
    model = PowerModel(capacity_mah=2000, sleep_current_ma=0.5)
    charge = power_step(model, 2000.0, 24 * 60, "sleeping", daylight=False)
    assert abs((2000.0 - charge) - 12.0) < 1e-9


def test_solar_charging_clamps_at_capacity():
    model = PowerModel(capacity_mah=2000, sleep_current_ma=0.5,
                       solar_charge_rate_ma=50)
    assert power_step(model, 2000.0, 60, "sleeping", daylight=True) == 2000.0
    charged = power_step(model, 1000.0, 60, "sleeping", daylight=True)
    assert abs(charged - 1049.5) < 1e-9


def test_voltage_curve_endpoints():
    model = PowerModel(capacity_mah=2000)
    assert model.voltage_at(0.0) == 3.0
    assert model.voltage_at(2000.0) == 4.2
    assert abs(model.voltage_at(1000.0) - 3.6) < 1e-9


def test_power_step_requires_positive_dt():
    with pytest.raises(NodeError):
        power_step(PowerModel(), 100.0, 0, "sleeping", False)


# -------------------------------------------------------------- wake cycle

def test_happy_path_transmits_samples_and_health():
    transport = FakeTransport()
    state, config, confirmed, actions = wake_cycle(
        _state(), _config(), now_ms=0, power=PowerModel(),
        transport=transport, observe_fn=_observe)

    names = [p.series.sensor_id for p in confirmed]
    assert names == ["depth", "flow", "battery_v", "signal_db", "conn_attempts"]
    assert state.buffer == []
    assert actions == []
    assert state.next_wake_ms == 15 * MIN
    assert state.mode == "sleeping"
    assert confirmed[0].value == 0.8
    assert confirmed[2].value == 4.2  # full pack
    assert state.signal_db == -62.0


def test_disabled_sensor_not_sampled():
    config = _config(sensors=(
        SensorBinding("depth", "pond", "depth"),
        SensorBinding("flow", "creek", "flow", enabled=False),
    ))
    transport = FakeTransport()
    _, _, confirmed, _ = wake_cycle(
        _state(), config, 0, PowerModel(), transport, _observe)
    assert "flow" not in [p.series.sensor_id for p in confirmed]


def test_link_down_retains_buffer_and_reschedules():
    transport = FakeTransport(link_up=False)
    state, config, confirmed, actions = wake_cycle(
        _state(), _config(), 0, PowerModel(), transport, _observe)

    assert confirmed == []
    assert len(state.buffer) == 5  # 2 sensors + 3 health
    assert state.next_wake_ms == 15 * MIN
    # fetch tried twice, write tried twice
    assert state.connection_attempts == 4
    assert state.failed_connections == 4


def test_buffer_flushes_in_order_after_outage():
    state, config = _state(), _config()
    down = FakeTransport(link_up=False)
    for cycle in range(3):
        state, config, confirmed, _ = wake_cycle(
            state, config, cycle * 15 * MIN, PowerModel(), down, _observe)
        assert confirmed == []
    assert len(state.buffer) == 15

    up = FakeTransport()
    state, config, confirmed, _ = wake_cycle(
        state, config, 3 * 15 * MIN, PowerModel(), up, _observe)
    assert len(confirmed) == 20
    assert state.buffer == []
    # per-series timestamps strictly increasing across the whole flush
    per_series: dict = {}
    for p in confirmed:
        per_series.setdefault(p.series, []).append(p.timestamp_ms)
    for stamps in per_series.values():
        assert stamps == sorted(stamps) and len(set(stamps)) == len(stamps)


def test_write_delivered_but_unconfirmed_keeps_buffer():
    transport = FakeTransport(write_ok=False)
    state, _, confirmed, _ = wake_cycle(
        _state(), _config(), 0, PowerModel(), transport, _observe)
    assert confirmed == []
    assert len(state.buffer) == 5


def test_buffer_overflow_drops_oldest_with_counter(monkeypatch):
    monkeypatch.setattr(node_mod, "BUFFER_CAPACITY", 8)
    state, config = _state(), _config()
    down = FakeTransport(link_up=False)
    for cycle in range(3):  # 15 points into capacity 8
        state, config, _, _ = wake_cycle(
            state, config, cycle * 15 * MIN, PowerModel(), down, _observe)
    assert len(state.buffer) == 8
    assert state.dropped_points == 7
    # survivors are the newest points
    assert state.buffer[-1].timestamp_ms == 2 * 15 * MIN


def test_brownout_skips_cycle_entirely():
    model = PowerModel(capacity_mah=2000, cutoff_voltage=3.2)
    # 3.2 V on the default curve is 1/6 of capacity; go below it
    state = _state(charge=200.0)
    transport = FakeTransport(commands=[
        Command(1, "n1", CommandKind.SET_VALVE, 0.0, 0)])
    state, config, confirmed, actions = wake_cycle(
        state, config := _config(), 0, model, transport, _observe)
    assert confirmed == [] and actions == []
    assert state.buffer == []
    assert state.connection_attempts == 0
    assert transport.commands  # never fetched
    assert state.next_wake_ms == 15 * MIN  # rtc still running


def test_wake_before_schedule_rejected():
    state = _state()
    state.next_wake_ms = 10 * MIN
    with pytest.raises(NodeError):
        wake_cycle(state, _config(), 0, PowerModel(), FakeTransport(), _observe)


def test_duty_cycle_below_five_percent():
    config = _config()
    awake_fraction = config.awake_window_s / (config.sampling_interval_min * 60)
    assert awake_fraction <= 0.05


def test_monotone_energy_fast_sampler_ends_lower():
    def run(interval_min):
        config = _config(sampling_interval_min=interval_min,
                         min_interval_min=3.0, max_interval_min=15.0)
        state = _state()
        model = PowerModel()
        now = 0
        while now < 24 * 60 * MIN:
            state, config, _, _ = wake_cycle(
                state, config, now, model, FakeTransport(), _observe)
            # sleep draw between wakes
            state.charge_mah = power_step(
                model, state.charge_mah, interval_min, "sleeping", False)
            now = state.next_wake_ms
        return state.charge_mah

    assert run(3.0) < run(15.0)


# ----------------------------------------------------------- command apply

def _cmd(cid, kind, payload):
    return Command(cid, "n1", kind, payload, issued_at=0)


def test_valve_command_emits_actuation_and_acks():
    transport = FakeTransport(commands=[_cmd(1, CommandKind.SET_VALVE, 0.0)])
    state, config, _, actions = wake_cycle(
        _state(), _config(), 0, PowerModel(), transport, _observe)
    assert actions == [Actuation("pond", 0.0)]
    assert transport.acks == [(1, "acked", None)]
    assert state.last_command_seq == 1


def test_valve_command_without_binding_rejected():
    state, config, actuation, outcome, detail = apply_command(
        _state(), _config(valve_element=None),
        _cmd(1, CommandKind.SET_VALVE, 0.5))
    assert actuation is None
    assert outcome == "rejected"
    assert "valve" in detail


def test_valve_target_clamped_with_flag():
    state, config, actuation, outcome, detail = apply_command(
        _state(), _config(), _cmd(1, CommandKind.SET_VALVE, 1.5))
    assert actuation == Actuation("pond", 1.0)
    assert outcome == "acked"
    assert "clamped" in detail


def test_sampling_interval_set_and_clamped():
    state, config, _, outcome, detail = apply_command(
        _state(), _config(), _cmd(1, CommandKind.SET_SAMPLING_INTERVAL, 3.0))
    assert config.sampling_interval_min == 3.0
    assert outcome == "acked" and detail is None

    state, config, _, outcome, detail = apply_command(
        state, config, _cmd(2, CommandKind.SET_SAMPLING_INTERVAL, 1.0))
    assert config.sampling_interval_min == 3.0
    assert "clamped" in detail


def test_new_interval_takes_effect_for_next_wake():
    transport = FakeTransport(
        commands=[_cmd(1, CommandKind.SET_SAMPLING_INTERVAL, 3.0)])
    state, config, _, _ = wake_cycle(
        _state(), _config(), 0, PowerModel(), transport, _observe)
    assert config.sampling_interval_min == 3.0
    assert state.next_wake_ms == 3 * MIN


def test_duplicate_seq_is_noop():
    state, config, actuation, outcome, detail = apply_command(
        _state(), _config(), _cmd(3, CommandKind.SET_VALVE, 0.5))
    state2, config2, actuation2, outcome2, detail2 = apply_command(
        state, config, _cmd(3, CommandKind.SET_VALVE, 0.5))
    assert actuation2 is None
    assert outcome2 == "acked" and detail2 == "duplicate"
    assert state2.last_command_seq == state.last_command_seq == 3


def test_apply_twice_is_idempotent():
    cmd = _cmd(5, CommandKind.SET_SAMPLING_INTERVAL, 5.0)
    s1, c1, _, _, _ = apply_command(_state(), _config(), cmd)
    s2, c2, _, _, _ = apply_command(s1, c1, cmd)
    assert (s2.last_command_seq, c2) == (s1.last_command_seq, c1)


def test_sensor_enable_toggle_and_last_sensor_guard():
    config = _config()
    state, config, _, outcome, _ = apply_command(
        _state(), config,
        _cmd(1, CommandKind.SET_SENSOR_ENABLED,
             {"sensor_id": "flow", "enabled": False}))
    assert outcome == "acked"
    assert [s.enabled for s in config.sensors] == [True, False]

    state, config, _, outcome, detail = apply_command(
        state, config,
        _cmd(2, CommandKind.SET_SENSOR_ENABLED,
             {"sensor_id": "depth", "enabled": False}))
    assert outcome == "rejected"
    assert "last sensor" in detail

    state, config, _, outcome, detail = apply_command(
        state, config,
        _cmd(3, CommandKind.SET_SENSOR_ENABLED,
             {"sensor_id": "ghost", "enabled": True}))
    assert outcome == "rejected"


def test_latest_command_per_kind_wins():
    transport = FakeTransport(commands=[
        _cmd(1, CommandKind.SET_VALVE, 0.5),
        _cmd(2, CommandKind.SET_VALVE, 0.0),
        _cmd(3, CommandKind.SET_SAMPLING_INTERVAL, 5.0),
    ])
    state, config, _, actions = wake_cycle(
        _state(), _config(), 0, PowerModel(), transport, _observe)
    assert actions == [Actuation("pond", 0.0)]
    assert config.sampling_interval_min == 5.0
    by_id = dict((cid, (outcome, detail)) for cid, outcome, detail in transport.acks)
    assert by_id[1] == ("acked", "superseded")
    assert by_id[2][0] == "acked"
    assert by_id[3][0] == "acked"
    assert state.last_command_seq == 3


def test_config_validation():
    with pytest.raises(NodeError):
        _config(sampling_interval_min=20.0)
    with pytest.raises(NodeError):
        _config(sensors=(SensorBinding("depth", "pond", "depth",
                                       enabled=False),))
