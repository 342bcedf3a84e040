"""Time-series storage engine plus the per-node command queue.

This is the single endpoint through which nodes and applications talk to each
other: nodes push measurements and poll for commands, applications query
series and enqueue commands. Everything is kept in insertion-ordered,
per-series sorted arrays; an optional append-only log file (in the wire line
grammar) survives restarts.

All public operations take the instance lock, so the store is linearizable at
the operation level for concurrent readers/writers (the networked server and
the simulation loop share one instance).
"""

from __future__ import annotations

import bisect
import math
import threading
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, NamedTuple, Optional


class SeriesKey(NamedTuple):
    sensor_id: str
    node_id: str

    def __str__(self) -> str:
        return f"{self.sensor_id},node={self.node_id}"

    @classmethod
    def parse(cls, text: str) -> "SeriesKey":
        sensor, sep, rest = text.partition(",node=")
        if not sep or not sensor or not rest:
            raise ValueError(f"bad series key {text!r}; want 'sensor,node=<id>'")
        return cls(sensor, rest)


@dataclass(frozen=True)
class Point:
    series: SeriesKey
    timestamp_ms: int
    value: float


class CommandKind(Enum):
    SET_VALVE = "set_valve"
    SET_SAMPLING_INTERVAL = "set_sampling_interval"
    SET_SENSOR_ENABLED = "set_sensor_enabled"


class CommandState(Enum):
    PENDING = "pending"
    DELIVERED = "delivered"
    ACKED = "acked"
    REJECTED = "rejected"


@dataclass
class Command:
    """A queued instruction for one node; ids are strictly increasing per node."""

    id: int
    node_id: str
    kind: CommandKind
    payload: object
    issued_at: int
    state: CommandState = CommandState.PENDING
    delivered_at: Optional[int] = None
    resolved_at: Optional[int] = None
    detail: Optional[str] = None


@dataclass
class WriteResult:
    written: int
    rejected: list[tuple[int, str]] = field(default_factory=list)


@dataclass
class AlertRecord:
    fired_at: int
    severity: str
    subject: str
    message: str


class _Series:
    """Sorted parallel arrays; duplicate timestamps overwrite (last writer wins)."""

    __slots__ = ("timestamps", "values")

    def __init__(self):
        self.timestamps: list[int] = []
        self.values: list[float] = []

    def insert(self, ts: int, value: float) -> None:
        i = bisect.bisect_left(self.timestamps, ts)
        if i < len(self.timestamps) and self.timestamps[i] == ts:
            self.values[i] = value
        else:
            self.timestamps.insert(i, ts)
            self.values.insert(i, value)


class DataStore:
    """In-memory time-series store + command queue + alert log.

    ``log_path`` turns on the append-only persistence log; on construction an
    existing log is replayed so series survive restarts.
    """

    def __init__(self, log_path: str | Path | None = None,
                 retention_window_ms: int | None = None):
        self._lock = threading.RLock()
        self._series: dict[SeriesKey, _Series] = {}
        self._commands: dict[str, list[Command]] = {}
        self._next_command_id: dict[str, int] = {}
        self._redelivery_timeout_ms: dict[str, int] = {}
        self._default_redelivery_timeout_ms = 30 * 60_000
        self._alerts: list[AlertRecord] = []
        self.retention_window_ms = retention_window_ms
        self.on_point: list[Callable[[Point], None]] = []
        self.on_alert: list[Callable[[AlertRecord], None]] = []
        self.on_command: list[Callable[[Command], None]] = []
        self._log_path = Path(log_path) if log_path else None
        self._log_file = None
        if self._log_path is not None:
            self._replay_log()
            self._log_file = open(self._log_path, "a", encoding="utf-8")

    # -- points ---------------------------------------------------------

    def write_points(self, points: list[Point]) -> WriteResult:
        """Store a batch. Non-finite values are rejected per point with index."""
        accepted: list[Point] = []
        rejected: list[tuple[int, str]] = []
        for i, p in enumerate(points):
            if not math.isfinite(p.value):
                rejected.append((i, "non-finite value"))
            elif not isinstance(p.timestamp_ms, int):
                rejected.append((i, "non-integer timestamp"))
            else:
                accepted.append(p)
        with self._lock:
            for p in accepted:
                series = self._series.get(p.series)
                if series is None:
                    series = self._series[p.series] = _Series()
                series.insert(p.timestamp_ms, p.value)
            if self._log_file is not None and accepted:
                from .telemetry import encode_points  # local import: avoid cycle
                self._log_file.write(encode_points(accepted))
                self._log_file.flush()
        for p in accepted:
            for hook in self.on_point:
                hook(p)
        return WriteResult(written=len(accepted), rejected=rejected)

    def query_range(self, series: SeriesKey, t_start: int, t_end: int) -> list[Point]:
        """Points with t_start <= t < t_end, ascending. Unknown series -> []."""
        if t_start > t_end:
            raise ValueError("t_start must be <= t_end")
        with self._lock:
            s = self._series.get(series)
            if s is None:
                return []
            lo = bisect.bisect_left(s.timestamps, t_start)
            hi = bisect.bisect_left(s.timestamps, t_end)
            return [
                Point(series, s.timestamps[i], s.values[i]) for i in range(lo, hi)
            ]

    def query_last(self, series: SeriesKey) -> Optional[Point]:
        with self._lock:
            s = self._series.get(series)
            if s is None or not s.timestamps:
                return None
            return Point(series, s.timestamps[-1], s.values[-1])

    def list_series(self, sensor_id: str | None = None) -> list[SeriesKey]:
        with self._lock:
            keys = list(self._series.keys())
        if sensor_id is not None:
            keys = [k for k in keys if k.sensor_id == sensor_id]
        return keys

    def prune(self, now_ms: int) -> int:
        """Drop points older than the retention window. Returns count removed."""
        if self.retention_window_ms is None:
            return 0
        cutoff = now_ms - self.retention_window_ms
        removed = 0
        with self._lock:
            for s in self._series.values():
                i = bisect.bisect_left(s.timestamps, cutoff)
                if i > 0:
                    del s.timestamps[:i]
                    del s.values[:i]
                    removed += i
        return removed

    # -- command queue ----------------------------------------------------

    def set_redelivery_timeout(self, node_id: str, timeout_ms: int) -> None:
        self._redelivery_timeout_ms[node_id] = timeout_ms

    def enqueue_command(self, node_id: str, kind: CommandKind, payload: object,
                        issued_at: int) -> int:
        with self._lock:
            cmd_id = self._next_command_id.get(node_id, 0) + 1
            self._next_command_id[node_id] = cmd_id
            cmd = Command(cmd_id, node_id, kind, payload, issued_at)
            self._commands.setdefault(node_id, []).append(cmd)
        self._notify_command(cmd)
        return cmd_id

    def fetch_pending(self, node_id: str, now_ms: int) -> list[Command]:
        """Return deliverable commands in id order, marking them delivered.

        At-least-once: a command fetched but never acked is handed out again
        once its redelivery timeout has elapsed.
        """
        timeout = self._redelivery_timeout_ms.get(
            node_id, self._default_redelivery_timeout_ms)
        out: list[Command] = []
        with self._lock:
            for cmd in self._commands.get(node_id, []):
                if cmd.state is CommandState.PENDING:
                    cmd.state = CommandState.DELIVERED
                    cmd.delivered_at = now_ms
                    out.append(replace(cmd))
                elif (cmd.state is CommandState.DELIVERED
                      and cmd.delivered_at is not None
                      and now_ms - cmd.delivered_at >= timeout):
                    cmd.delivered_at = now_ms
                    out.append(replace(cmd))
        for cmd in out:
            self._notify_command(cmd)
        return out

    def ack(self, node_id: str, command_id: int, outcome: str,
            now_ms: int, detail: str | None = None) -> CommandState:
        """Resolve a delivered command. Idempotent; unknown id is an error."""
        if outcome not in ("acked", "rejected"):
            raise ValueError(f"bad ack outcome {outcome!r}")
        with self._lock:
            for cmd in self._commands.get(node_id, []):
                if cmd.id != command_id:
                    continue
                if cmd.state in (CommandState.ACKED, CommandState.REJECTED):
                    return cmd.state  # already resolved: no-op success
                if cmd.state is CommandState.PENDING:
                    raise ValueError(
                        f"command {command_id} for {node_id} not yet delivered")
                cmd.state = (CommandState.ACKED if outcome == "acked"
                             else CommandState.REJECTED)
                cmd.resolved_at = now_ms
                cmd.detail = detail
                resolved = replace(cmd)
                break
            else:
                raise KeyError(f"unknown command {command_id} for node {node_id}")
        self._notify_command(resolved)
        return resolved.state

    def commands_for(self, node_id: str) -> list[Command]:
        with self._lock:
            return [replace(c) for c in self._commands.get(node_id, [])]

    def all_commands(self) -> list[Command]:
        with self._lock:
            return [c2 for cmds in self._commands.values()
                    for c2 in (replace(c) for c in cmds)]

    def _notify_command(self, cmd: Command) -> None:
        for hook in self.on_command:
            hook(cmd)

    # -- alerts -----------------------------------------------------------

    def append_alert(self, alert: AlertRecord) -> None:
        with self._lock:
            self._alerts.append(alert)
        for hook in self.on_alert:
            hook(alert)

    def alerts_since(self, since_ms: int = 0) -> list[AlertRecord]:
        with self._lock:
            return [a for a in self._alerts if a.fired_at >= since_ms]

    # -- snapshots ----------------------------------------------------------

    def dump_bytes(self) -> bytes:
        """Stable byte serialization of all stored points (for isolation checks)."""
        from .telemetry import encode_points  # local import: avoid cycle
        with self._lock:
            keys = sorted(self._series.keys())
            chunks = []
            for k in keys:
                s = self._series[k]
                chunks.append(encode_points(
                    [Point(k, t, v) for t, v in zip(s.timestamps, s.values)]))
        return "".join(chunks).encode()

    def _replay_log(self) -> None:
        if self._log_path is None or not self._log_path.exists():
            return
        from .telemetry import decode_points  # local import: avoid cycle
        text = self._log_path.read_text(encoding="utf-8")
        points = decode_points(text)
        for p in points:
            series = self._series.get(p.series)
            if series is None:
                series = self._series[p.series] = _Series()
            series.insert(p.timestamp_ms, p.value)

    def close(self) -> None:
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None
