"""Server-side application layer: subscriptions over the datastore.

Read subscriptions watch series and raise alerts (thresholds, dead nodes),
write subscriptions derive new series, trigger subscriptions enqueue node
commands: adaptive sampling driven by rain forecasts, the hold/release rule
for paired pond-wetland operation, and a PID set-point loop on any measured
series. Each subscription keeps its own memory (integrators, debounce
stamps, phase) and is evaluated on its own cadence.

Actions apply through the datastore's atomic operations, so a subscription
either lands its alert/command or raises and is marked errored without
disturbing its peers.
"""

from __future__ import annotations

import operator
from dataclasses import dataclass, field
from typing import Optional

from .datastore import AlertRecord, CommandKind, DataStore, SeriesKey

DEBOUNCE_DEFAULT_MIN = 60.0

_COMPARATORS = {
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
}


@dataclass(frozen=True)
class AppliedAction:
    """One thing a subscription did, for the run report."""

    subscription_id: str
    kind: str  # alert | command | write
    detail: str


@dataclass
class PidParams:
    kp: float
    ki: float = 0.0
    kd: float = 0.0
    setpoint: float = 0.0
    output_min: float = 0.0
    output_max: float = 1.0
    integral_clamp: Optional[float] = None  # |I| bound; None derives from ki

    def integral_bound(self) -> float:
        if self.integral_clamp is not None:
            return self.integral_clamp
        if self.ki:
            # enough integral authority to span the whole output range;
            # sign-free so reverse-acting loops (negative gains) wind up too
            return (self.output_max - self.output_min) / abs(self.ki)
        return 0.0


@dataclass
class PidState:
    integral: float = 0.0
    prev_error: Optional[float] = None


def pid_step(params: PidParams, measurement: float, state: PidState,
             dt_minutes: float) -> tuple[float, PidState]:
    """One controller update; returns (output, new state).

    Anti-windup by conditional integration: while the unsaturated output is
    pegged at a limit and integrating the current error would push it further
    past, the integrator holds. The integral is additionally clamped to
    +-integral_bound().
    """
    if dt_minutes <= 0:
        raise ValueError("dt must be positive")
    error = params.setpoint - measurement
    derivative = 0.0
    if state.prev_error is not None and params.kd:
        derivative = (error - state.prev_error) / dt_minutes
    raw = params.kp * error + params.ki * state.integral + params.kd * derivative
    output = min(params.output_max, max(params.output_min, raw))

    # ki*error is the direction integration would move the raw output
    push = params.ki * error
    saturated_high = raw >= params.output_max and push > 0
    saturated_low = raw <= params.output_min and push < 0
    integral = state.integral
    if not (saturated_high or saturated_low):
        integral += error * dt_minutes
        bound = params.integral_bound()
        integral = min(bound, max(-bound, integral))
    return output, PidState(integral=integral, prev_error=error)


@dataclass
class Subscription:
    """Base: cadence bookkeeping and per-subject debounce."""

    id: str
    evaluation_interval_min: float = 5.0
    debounce_window_min: float = DEBOUNCE_DEFAULT_MIN
    last_eval_ms: Optional[int] = None
    errored: bool = False
    error_detail: Optional[str] = None
    _last_fired: dict = field(default_factory=dict)

    kind = "read"

    def due(self, now_ms: int) -> bool:
        if self.last_eval_ms is None:
            return True
        return now_ms - self.last_eval_ms >= self.evaluation_interval_min * 60_000

    def _debounced(self, subject: str, now_ms: int) -> bool:
        """True if this subject already fired within the debounce window."""
        last = self._last_fired.get(subject)
        if last is not None and now_ms - last < self.debounce_window_min * 60_000:
            return True
        self._last_fired[subject] = now_ms
        return False

    def fire_alert(self, store: DataStore, now_ms: int, severity: str,
                   subject: str, message: str,
                   actions: list[AppliedAction]) -> None:
        if self._debounced(subject, now_ms):
            return
        store.append_alert(AlertRecord(
            fired_at=now_ms, severity=severity, subject=subject,
            message=message))
        actions.append(AppliedAction(self.id, "alert",
                                     f"{severity}: {subject}: {message}"))

    def evaluate(self, store: DataStore, now_ms: int,
                 node_intervals: dict[str, float]) -> list[AppliedAction]:
        raise NotImplementedError


@dataclass
class ThresholdAlert(Subscription):
    """Read subscription: alert when the latest value crosses a threshold."""

    series: SeriesKey = None
    comparator: str = "<"
    threshold: float = 0.0
    severity: str = "warning"
    message: str = "{series} is {value:.3g} ({comparator} {threshold:g})"

    kind = "read"

    def evaluate(self, store, now_ms, node_intervals):
        if self.comparator not in _COMPARATORS:
            raise ValueError(f"unknown comparator {self.comparator!r}")
        actions: list[AppliedAction] = []
        points = store.query_range(self.series, 0, now_ms + 1)
        if not points:
            return actions
        value = points[-1].value
        if _COMPARATORS[self.comparator](value, self.threshold):
            text = self.message.format(
                series=self.series, value=value,
                comparator=self.comparator, threshold=self.threshold)
            self.fire_alert(store, now_ms, self.severity, str(self.series),
                            text, actions)
        return actions


@dataclass
class DeadmanAlert(Subscription):
    """Critical alert when a node goes silent for consecutive windows."""

    node_id: str = ""
    missed_windows: int = 3
    severity: str = "critical"

    kind = "read"

    def evaluate(self, store, now_ms, node_intervals):
        actions: list[AppliedAction] = []
        window_ms = int(self.missed_windows
                        * self.evaluation_interval_min * 60_000)
        start = now_ms - window_ms
        node_series = [key for key in store.list_series()
                       if key.node_id == self.node_id]
        if not node_series:
            return actions  # node has never reported; deadman starts after first data
        seen = any(store.query_range(key, max(0, start), now_ms + 1)
                   for key in node_series)
        if not seen:
            self.fire_alert(
                store, now_ms, self.severity, f"node:{self.node_id}",
                f"no data from {self.node_id} for {self.missed_windows} "
                f"windows ({self.evaluation_interval_min:g} min each)",
                actions)
        return actions


@dataclass
class AdaptiveSampling(Subscription):
    """Trigger subscription: speed up sampling when rain is forecast.

    Reads the most recent forecast probability at/before now; commands the
    fast interval at/above the threshold, the slow one below. A command is
    enqueued only when it would change the node's interval (no churn).
    """

    node_id: str = ""
    forecast_series: SeriesKey = None
    rain_probability_threshold: float = 0.5
    fast_interval_min: float = 3.0
    slow_interval_min: float = 15.0
    _last_commanded: Optional[float] = None

    kind = "trigger"

    def __post_init__(self):
        if self.fast_interval_min >= self.slow_interval_min:
            raise ValueError("fast interval must be shorter than slow")

    def evaluate(self, store, now_ms, node_intervals):
        actions: list[AppliedAction] = []
        points = store.query_range(self.forecast_series, 0, now_ms + 1)
        if not points:
            self.fire_alert(store, now_ms, "info",
                            f"forecast:{self.forecast_series}",
                            "no forecast data available", actions)
            return actions
        probability = points[-1].value
        target = (self.fast_interval_min
                  if probability >= self.rain_probability_threshold
                  else self.slow_interval_min)
        current = node_intervals.get(self.node_id)
        if target == current or target == self._last_commanded:
            return actions
        store.enqueue_command(self.node_id, CommandKind.SET_SAMPLING_INTERVAL,
                              target, now_ms)
        self._last_commanded = target
        actions.append(AppliedAction(
            self.id, "command",
            f"sampling interval {target:g} min for {self.node_id} "
            f"(p={probability:.2f})"))
        return actions


@dataclass
class SetpointRelease(Subscription):
    """Hold-then-release rule for a pond draining into a wetland.

    While the wetland runs above safe_release_depth the pond valve is held
    shut; once it recedes below the threshold minus the hysteresis band the
    stored water is let go. Stale wetland data fails safe: hold, and warn.
    """

    valve_node_id: str = ""
    wetland_depth_series: SeriesKey = None
    safe_release_depth_m: float = 1.0
    hysteresis_m: float = 0.05
    release_opening: float = 1.0
    staleness_window_min: float = 45.0
    _phase: str = "init"  # init | holding | releasing
    _last_commanded: Optional[float] = None

    kind = "trigger"

    def _command(self, store, now_ms, opening, actions, note):
        if opening == self._last_commanded:
            return
        store.enqueue_command(self.valve_node_id, CommandKind.SET_VALVE,
                              opening, now_ms)
        self._last_commanded = opening
        actions.append(AppliedAction(
            self.id, "command",
            f"valve {opening:g} for {self.valve_node_id} ({note})"))

    def evaluate(self, store, now_ms, node_intervals):
        actions: list[AppliedAction] = []
        points = store.query_range(self.wetland_depth_series, 0, now_ms + 1)
        stale_ms = self.staleness_window_min * 60_000
        if not points or now_ms - points[-1].timestamp_ms > stale_ms:
            self._phase = "holding"
            self._command(store, now_ms, 0.0, actions, "stale wetland data")
            self.fire_alert(
                store, now_ms, "warning", str(self.wetland_depth_series),
                "wetland depth stale; holding pond closed", actions)
            return actions

        depth = points[-1].value
        if depth > self.safe_release_depth_m:
            phase = "holding"
        elif depth < self.safe_release_depth_m - self.hysteresis_m:
            phase = "releasing"
        else:
            phase = self._phase if self._phase != "init" else "holding"

        self._phase = phase
        if phase == "holding":
            self._command(store, now_ms, 0.0, actions,
                          f"wetland at {depth:.2f} m")
        else:
            self._command(store, now_ms, self.release_opening, actions,
                          f"wetland receded to {depth:.2f} m")
        return actions


@dataclass
class PidValveControl(Subscription):
    """Trigger subscription: PID on a measured series driving a valve."""

    valve_node_id: str = ""
    measurement_series: SeriesKey = None
    params: PidParams = None
    deadband: float = 1e-3  # skip re-commanding within this of the last output
    _pid_state: PidState = field(default_factory=PidState)
    _last_commanded: Optional[float] = None

    kind = "trigger"

    def evaluate(self, store, now_ms, node_intervals):
        actions: list[AppliedAction] = []
        points = store.query_range(self.measurement_series, 0, now_ms + 1)
        if not points:
            return actions
        if self.last_eval_ms is None:
            dt_min = self.evaluation_interval_min
        else:
            dt_min = (now_ms - self.last_eval_ms) / 60_000.0
        if dt_min <= 0:
            return actions
        output, self._pid_state = pid_step(
            self.params, points[-1].value, self._pid_state, dt_min)
        if self._last_commanded is not None \
                and abs(output - self._last_commanded) <= self.deadband:
            return actions
        store.enqueue_command(self.valve_node_id, CommandKind.SET_VALVE,
                              output, now_ms)
        self._last_commanded = output
        actions.append(AppliedAction(
            self.id, "command",
            f"valve {output:.4f} for {self.valve_node_id}"))
        return actions


@dataclass
class RollingMeanWrite(Subscription):
    """Write subscription: windowed mean of one series stored as another."""

    source: SeriesKey = None
    target: SeriesKey = None
    window_min: float = 60.0

    kind = "write"

    def evaluate(self, store, now_ms, node_intervals):
        actions: list[AppliedAction] = []
        start = now_ms - int(self.window_min * 60_000)
        points = store.query_range(self.source, max(0, start), now_ms + 1)
        if not points:
            return actions
        mean = sum(p.value for p in points) / len(points)
        from .datastore import Point
        store.write_points([Point(self.target, now_ms, mean)])
        actions.append(AppliedAction(
            self.id, "write", f"{self.target}={mean:.6g} over {len(points)} pts"))
        return actions


def evaluate(subscriptions: list[Subscription], store: DataStore, now_ms: int,
             node_intervals: Optional[dict[str, float]] = None,
             ) -> list[AppliedAction]:
    """Run every due subscription once; a failure isolates to its owner."""
    node_intervals = node_intervals or {}
    applied: list[AppliedAction] = []
    for sub in subscriptions:
        if sub.errored or not sub.due(now_ms):
            continue
        try:
            applied.extend(sub.evaluate(store, now_ms, node_intervals))
        except Exception as exc:  # noqa: BLE001 - isolate per spec
            sub.errored = True
            sub.error_detail = f"{type(exc).__name__}: {exc}"
            store.append_alert(AlertRecord(
                fired_at=now_ms, severity="warning",
                subject=f"subscription:{sub.id}",
                message=f"evaluation failed: {sub.error_detail}"))
        sub.last_eval_ms = now_ms
    return applied
