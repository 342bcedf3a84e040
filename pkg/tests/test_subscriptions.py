"""Subscription engine: PID control, alerts, adaptive sampling, hold/release."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stormsim.datastore import (
    CommandKind,
    CommandState,
    DataStore,
    Point,
    SeriesKey,
)
from stormsim.subscriptions import (
    AdaptiveSampling,
    DeadmanAlert,
    PidParams,
    PidState,
    PidValveControl,
    RollingMeanWrite,
    SetpointRelease,
    ThresholdAlert,
    evaluate,
    pid_step,
)

MIN = 60_000
BATT = SeriesKey("battery_v", "n2")
WETLAND = SeriesKey("depth", "wetland_node")
FORECAST = SeriesKey("rain_probability", "forecast")


def _store_with(series, pairs):
    store = DataStore()
    store.write_points([Point(series, t, v) for t, v in pairs])
    return store


# --------------------------------------------------------------------- pid

def test_pid_proportional_oracle():
    params = PidParams(kp=1.0, setpoint=1.0)
    out, _ = pid_step(params, 0.6, PidState(), 1.0)
    assert abs(out - 0.4) < 1e-12


def test_pid_zero_error_zero_output():
    params = PidParams(kp=1.0, ki=0.5, kd=0.1, setpoint=0.7)
    out, state = pid_step(params, 0.7, PidState(), 1.0)
    assert out == 0.0
    assert state.integral == 0.0


def test_pid_three_step_saturation_oracle():
    # kp=2, ki=0.1, constant error 0.5: raw = 2*0.5 + 0.1*I = 1.0 at I=0,
    # which pegs the output every step, so conditional integration holds
    # I at 0 and the hand sequence is [1.0, 1.0, 1.0]
    params = PidParams(kp=2.0, ki=0.1, setpoint=1.0)
    state = PidState()
    outputs = []
    for _ in range(3):
        out, state = pid_step(params, 0.5, state, 1.0)
        outputs.append(out)
    assert outputs == [1.0, 1.0, 1.0]
    assert state.integral == 0.0


def test_pid_integral_accumulates_when_unsaturated():
    params = PidParams(kp=0.5, ki=0.1, setpoint=1.0)
    state = PidState()
    out1, state = pid_step(params, 0.8, state, 1.0)  # raw 0.1, no saturation
    assert abs(out1 - 0.1) < 1e-12
    assert abs(state.integral - 0.2) < 1e-12
    out2, state = pid_step(params, 0.8, state, 1.0)  # raw 0.1 + 0.02
    assert abs(out2 - 0.12) < 1e-12


def test_pid_derivative_term():
    params = PidParams(kp=0.0, ki=0.0, kd=1.0, setpoint=1.0)
    state = PidState()
    _, state = pid_step(params, 0.5, state, 1.0)  # e=0.5, no prev
    out, _ = pid_step(params, 0.3, state, 1.0)    # e=0.7, de/dt=0.2
    assert abs(out - 0.2) < 1e-12


def test_pid_requires_positive_dt():
    with pytest.raises(ValueError):
        pid_step(PidParams(kp=1.0), 0.0, PidState(), 0.0)


@settings(max_examples=300, deadline=None)
@given(measurements=st.lists(st.floats(-100, 100), min_size=1, max_size=50))
def test_pid_output_bounded_integral_clamped(measurements):
    params = PidParams(kp=1.3, ki=0.2, kd=0.05, setpoint=0.5)
    state = PidState()
    bound = params.integral_bound()
    for m in measurements:
        out, state = pid_step(params, m, state, 1.0)
        assert 0.0 <= out <= 1.0
        assert abs(state.integral) <= bound + 1e-9


@given(error=st.floats(-10, 10))
def test_pid_pure_p_is_clamped_affine(error):
    params = PidParams(kp=2.0, setpoint=0.0)
    out, _ = pid_step(params, -error, PidState(), 1.0)
    assert out == min(1.0, max(0.0, 2.0 * error))


# ------------------------------------------------------------- thresholds

def test_threshold_alert_fires_and_debounces():
    store = _store_with(BATT, [(0, 3.5), (10 * MIN, 3.1)])
    sub = ThresholdAlert(id="low-batt", series=BATT, comparator="<",
                         threshold=3.3, severity="warning",
                         evaluation_interval_min=5.0)
    actions = evaluate([sub], store, 10 * MIN)
    assert len(actions) == 1
    alerts = store.alerts_since(0)
    assert alerts[0].severity == "warning"
    assert "battery_v,node=n2" in alerts[0].subject

    # within the 60 min debounce window: silent
    store.write_points([Point(BATT, 20 * MIN, 3.0)])
    assert evaluate([sub], store, 20 * MIN) == []
    # past it: fires again
    store.write_points([Point(BATT, 80 * MIN, 3.0)])
    assert len(evaluate([sub], store, 80 * MIN)) == 1


def test_threshold_quiet_when_condition_clear():
    store = _store_with(BATT, [(0, 4.0)])
    sub = ThresholdAlert(id="low-batt", series=BATT, comparator="<",
                         threshold=3.3)
    assert evaluate([sub], store, MIN) == []
    assert store.alerts_since(0) == []


def test_threshold_no_data_no_alert():
    sub = ThresholdAlert(id="t", series=BATT, comparator="<", threshold=3.3)
    assert evaluate([sub], DataStore(), MIN) == []


# ---------------------------------------------------------------- deadman

def test_deadman_fires_after_silence():
    store = _store_with(BATT, [(0, 3.9)])
    sub = DeadmanAlert(id="dead-n2", node_id="n2",
                       evaluation_interval_min=15.0, missed_windows=3)
    # 45 min of silence after the single point at t=0
    actions = evaluate([sub], store, 50 * MIN)
    assert len(actions) == 1
    alert = store.alerts_since(0)[0]
    assert alert.severity == "critical"
    assert "n2" in alert.message


def test_deadman_quiet_with_recent_data():
    store = _store_with(BATT, [(0, 3.9), (40 * MIN, 3.8)])
    sub = DeadmanAlert(id="dead-n2", node_id="n2",
                       evaluation_interval_min=15.0)
    assert evaluate([sub], store, 50 * MIN) == []


def test_deadman_ignores_never_reporting_node():
    sub = DeadmanAlert(id="dead-ghost", node_id="ghost",
                       evaluation_interval_min=15.0)
    assert evaluate([sub], DataStore(), 500 * MIN) == []


# ------------------------------------------------------- adaptive sampling

def _adaptive(**kw):
    defaults = dict(id="adapt-n2", node_id="n2", forecast_series=FORECAST,
                    rain_probability_threshold=0.5, fast_interval_min=3.0,
                    slow_interval_min=15.0, evaluation_interval_min=5.0)
    defaults.update(kw)
    return AdaptiveSampling(**defaults)


def test_adaptive_speeds_up_on_rain_forecast():
    store = _store_with(FORECAST, [(0, 0.8)])
    sub = _adaptive()
    actions = evaluate([sub], store, MIN, node_intervals={"n2": 15.0})
    assert len(actions) == 1
    cmds = store.commands_for("n2")
    assert cmds[0].kind is CommandKind.SET_SAMPLING_INTERVAL
    assert cmds[0].payload == 3.0


def test_adaptive_slows_down_when_clear():
    store = _store_with(FORECAST, [(0, 0.1)])
    sub = _adaptive()
    evaluate([sub], store, MIN, node_intervals={"n2": 3.0})
    assert store.commands_for("n2")[0].payload == 15.0


def test_adaptive_no_churn_when_already_fast():
    store = _store_with(FORECAST, [(0, 0.9)])
    sub = _adaptive()
    assert evaluate([sub], store, MIN, node_intervals={"n2": 3.0}) == []
    assert store.commands_for("n2") == []


def test_adaptive_no_repeat_while_command_in_flight():
    store = _store_with(FORECAST, [(0, 0.9)])
    sub = _adaptive()
    evaluate([sub], store, MIN, node_intervals={"n2": 15.0})
    # node has not applied it yet; next evaluation must not duplicate
    evaluate([sub], store, 10 * MIN, node_intervals={"n2": 15.0})
    assert len(store.commands_for("n2")) == 1


def test_adaptive_missing_forecast_info_alert():
    sub = _adaptive()
    actions = evaluate([sub], DataStore(), MIN, node_intervals={"n2": 15.0})
    assert actions and actions[0].kind == "alert"


def test_adaptive_validates_intervals():
    with pytest.raises(ValueError):
        _adaptive(fast_interval_min=15.0, slow_interval_min=15.0)


# ----------------------------------------------------------- hold/release

def _release(**kw):
    defaults = dict(id="pond-release", valve_node_id="pond_node",
                    wetland_depth_series=WETLAND, safe_release_depth_m=1.0,
                    hysteresis_m=0.1, release_opening=1.0,
                    staleness_window_min=45.0, evaluation_interval_min=5.0)
    defaults.update(kw)
    return SetpointRelease(**defaults)


def test_release_holds_while_wetland_high():
    store = _store_with(WETLAND, [(0, 1.4)])
    sub = _release()
    evaluate([sub], store, MIN)
    cmds = store.commands_for("pond_node")
    assert len(cmds) == 1
    assert cmds[0].kind is CommandKind.SET_VALVE and cmds[0].payload == 0.0


def test_release_opens_after_recession():
    store = _store_with(WETLAND, [(0, 0.85)])
    sub = _release()
    evaluate([sub], store, MIN)
    assert store.commands_for("pond_node")[0].payload == 1.0


def test_release_hysteresis_band_keeps_phase():
    store = _store_with(WETLAND, [(0, 1.4)])
    sub = _release()
    evaluate([sub], store, MIN)  # holding

    # depth inside (0.9, 1.0]: no flip, no new command
    store.write_points([Point(WETLAND, 10 * MIN, 0.95)])
    evaluate([sub], store, 10 * MIN)
    assert len(store.commands_for("pond_node")) == 1

    # crossing below 0.9 releases; then re-entering the band does not re-close
    store.write_points([Point(WETLAND, 20 * MIN, 0.88)])
    evaluate([sub], store, 20 * MIN)
    store.write_points([Point(WETLAND, 30 * MIN, 0.95)])
    evaluate([sub], store, 30 * MIN)
    cmds = store.commands_for("pond_node")
    assert [c.payload for c in cmds] == [0.0, 1.0]


def test_release_stale_data_fails_safe():
    store = _store_with(WETLAND, [(0, 0.5)])  # would release if fresh
    sub = _release()
    actions = evaluate([sub], store, 120 * MIN)  # 2 h stale > 45 min window
    cmds = store.commands_for("pond_node")
    assert cmds[0].payload == 0.0
    alerts = store.alerts_since(0)
    assert alerts and alerts[0].severity == "warning"
    assert "stale" in alerts[0].message


def test_release_no_duplicate_identical_commands():
    store = _store_with(WETLAND, [(0, 1.4)])
    sub = _release()
    for t in range(1, 5):
        store.write_points([Point(WETLAND, t * 10 * MIN, 1.4)])
        evaluate([sub], store, t * 10 * MIN)
    assert len(store.commands_for("pond_node")) == 1


# ------------------------------------------------------------- pid control

def test_pid_subscription_commands_valve():
    depth = SeriesKey("depth", "pond_node")
    store = _store_with(depth, [(0, 0.4)])
    sub = PidValveControl(
        id="pid-pond", valve_node_id="pond_node", measurement_series=depth,
        params=PidParams(kp=1.0, setpoint=0.9), evaluation_interval_min=5.0)
    evaluate([sub], store, MIN)
    cmds = store.commands_for("pond_node")
    assert len(cmds) == 1
    assert abs(cmds[0].payload - 0.5) < 1e-9


def test_pid_subscription_deadband_suppresses_rewrites():
    depth = SeriesKey("depth", "pond_node")
    store = _store_with(depth, [(0, 0.4)])
    sub = PidValveControl(
        id="pid-pond", valve_node_id="pond_node", measurement_series=depth,
        params=PidParams(kp=1.0, setpoint=0.9), evaluation_interval_min=5.0)
    evaluate([sub], store, MIN)
    evaluate([sub], store, 6 * MIN)  # same measurement, same output
    assert len(store.commands_for("pond_node")) == 1


# ------------------------------------------------------------ write series

def test_rolling_mean_write():
    src = SeriesKey("flow", "n1")
    dst = SeriesKey("flow_mean_1h", "n1")
    store = _store_with(src, [(0, 1.0), (30 * MIN, 3.0)])
    sub = RollingMeanWrite(id="mean", source=src, target=dst, window_min=60.0)
    evaluate([sub], store, 45 * MIN)
    got = store.query_last(dst)
    assert got.value == 2.0
    assert got.timestamp_ms == 45 * MIN


# -------------------------------------------------------------- evaluation

def test_errored_subscription_isolated():
    store = _store_with(BATT, [(0, 3.0)])
    bad = ThresholdAlert(id="bad", series=BATT, comparator="!!",
                         threshold=1.0)
    good = ThresholdAlert(id="good", series=BATT, comparator="<",
                          threshold=3.3)
    actions = evaluate([bad, good], store, MIN)
    assert bad.errored and "comparator" in bad.error_detail
    assert [a.subscription_id for a in actions] == ["good"]
    # errored subscription reported once, then skipped
    subjects = [a.subject for a in store.alerts_since(0)]
    assert "subscription:bad" in subjects
    assert evaluate([bad], store, 2 * MIN) == []


def test_evaluation_cadence_honored():
    store = _store_with(BATT, [(0, 3.0)])
    sub = ThresholdAlert(id="t", series=BATT, comparator="<", threshold=3.3,
                         evaluation_interval_min=10.0,
                         debounce_window_min=0.0)
    assert len(evaluate([sub], store, 0)) == 1
    assert evaluate([sub], store, 5 * MIN) == []  # not due yet
    assert len(evaluate([sub], store, 10 * MIN)) == 1
