"""Wire protocol between nodes and the server, plus the simulated cellular link.

The payload format is a line-oriented text grammar, one point per line:

    sensor,node=<node_id> value=<decimal> <timestamp_ms>\\n

Names match ``[A-Za-z0-9_]+``, timestamps are integer milliseconds UTC,
decimals are rendered shortest-roundtrip (``repr`` of a Python float), lines
end with LF. ``decode_points(encode_points(pts)) == pts`` for every valid
batch; malformed input is rejected with the offending 1-based line number.

The link model injects latency, random loss and scheduled outage windows.
All randomness comes from a caller-supplied seeded generator so runs replay
bit-identically.
"""

from __future__ import annotations

import hmac
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from random import Random
from typing import Optional, Sequence

from .datastore import Command, Point, SeriesKey

_NAME_RE = re.compile(r"^[A-Za-z0-9_]+$")
_LINE_RE = re.compile(
    r"^([A-Za-z0-9_]+),node=([A-Za-z0-9_]+) value=([^ ]+) (-?\d+)$"
)


class ProtocolError(ValueError):
    """Malformed wire payload. Carries the 1-based line number."""

    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


def encode_points(points: Sequence[Point]) -> str:
    """Render a batch of points in the line grammar. Empty batch -> ""."""
    lines = []
    for i, p in enumerate(points):
        if not _NAME_RE.match(p.series.sensor_id):
            raise ProtocolError(i + 1, f"bad sensor name {p.series.sensor_id!r}")
        if not _NAME_RE.match(p.series.node_id):
            raise ProtocolError(i + 1, f"bad node name {p.series.node_id!r}")
        if not isinstance(p.timestamp_ms, int):
            raise ProtocolError(i + 1, "timestamp must be integer milliseconds")
        if not math.isfinite(p.value):
            raise ProtocolError(i + 1, "value must be finite")
        lines.append(
            f"{p.series.sensor_id},node={p.series.node_id} "
            f"value={float(p.value)!r} {p.timestamp_ms}\n"
        )
    return "".join(lines)


def decode_points(text: str) -> list[Point]:
    """Parse a line-grammar payload. Raises ProtocolError naming the bad line."""
    points: list[Point] = []
    for lineno, raw in enumerate(text.split("\n"), start=1):
        if raw == "":
            continue  # trailing LF or blank line
        m = _LINE_RE.match(raw)
        if m is None:
            raise ProtocolError(lineno, f"unparseable line {raw!r}")
        sensor, node, value_text, ts_text = m.groups()
        try:
            value = float(value_text)
        except ValueError:
            raise ProtocolError(lineno, f"non-numeric value {value_text!r}") from None
        if not math.isfinite(value):
            raise ProtocolError(lineno, f"non-finite value {value_text!r}")
        points.append(Point(SeriesKey(sensor, node), int(ts_text), value))
    return points


class MessageKind(Enum):
    WRITE_POINTS = "write_points"
    FETCH_COMMANDS = "fetch_commands"
    ACK_COMMAND = "ack_command"
    COMMAND_LIST = "command_list"
    WRITE_ACK = "write_ack"
    AUTH_ERROR = "auth_error"


# node -> server request kinds; the reverse direction is everything else
_REQUEST_KINDS = {
    MessageKind.WRITE_POINTS,
    MessageKind.FETCH_COMMANDS,
    MessageKind.ACK_COMMAND,
}


@dataclass
class WireMessage:
    """One protocol message. Every node->server request carries auth."""

    kind: MessageKind
    node_id: str
    auth: tuple[str, str] | None = None
    points: list[Point] = field(default_factory=list)
    commands: list[Command] = field(default_factory=list)
    command_id: Optional[int] = None
    outcome: Optional[str] = None
    detail: Optional[str] = None
    written: int = 0

    @property
    def node_to_server(self) -> bool:
        return self.kind in _REQUEST_KINDS


@dataclass
class Delivered:
    at: int  # arrival timestamp, ms


class Dropped:
    """Singleton-ish marker for a lost message."""

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        return "Dropped"


DROPPED = Dropped()


@dataclass
class LinkModel:
    """Faulty cellular link: latency + jitter, random loss, outage windows.

    Delivery order between one node and the server preserves send order among
    delivered messages (per direction); enforced by never scheduling a
    delivery earlier than the previous one on the same (node, direction) pair.
    """

    base_latency_ms: int = 200
    latency_jitter_ms: int = 0
    loss_probability: float = 0.0
    outage_windows: list[tuple[int, int]] = field(default_factory=list)
    signal_strength_db: dict[str, float] = field(default_factory=dict)
    _last_delivery: dict[tuple[str, bool], int] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.loss_probability < 1.0:
            raise ValueError("loss_probability must be in [0, 1)")

    def in_outage(self, now: int) -> bool:
        return any(start <= now < end for start, end in self.outage_windows)

    def signal_for(self, node_id: str) -> float:
        return self.signal_strength_db.get(node_id, -70.0)


def link_transmit(
    msg: WireMessage, link: LinkModel, rng: Random, now: int
) -> Delivered | Dropped:
    """Decide the fate of one message: Delivered{at} or Dropped.

    Deterministic for a given rng state. Messages sent inside an outage
    window are always lost; otherwise they drop with ``loss_probability``.
    The loss draw is consumed even during outages so the rng stream does not
    depend on outage placement.
    """
    loss_draw = rng.random()
    jitter = rng.uniform(0, link.latency_jitter_ms) if link.latency_jitter_ms else 0.0
    if link.in_outage(now):
        return DROPPED
    if loss_draw < link.loss_probability:
        return DROPPED
    at = now + link.base_latency_ms + int(jitter)
    pair = (msg.node_id, msg.node_to_server)
    floor = link._last_delivery.get(pair, at)
    at = max(at, floor)  # FIFO among delivered, per direction
    link._last_delivery[pair] = at
    return Delivered(at)


class CredentialRegistry:
    """Username -> password store with constant-time verification."""

    def __init__(self, credentials: dict[str, str] | None = None):
        self._creds = dict(credentials or {})

    def add(self, username: str, password: str) -> None:
        self._creds[username] = password

    def verify(self, username: str, password: str) -> bool:
        # Compare against a real or dummy secret either way, so timing does
        # not reveal whether the username exists.
        expected = self._creds.get(username)
        reference = expected if expected is not None else "\x00missing\x00"
        ok = hmac.compare_digest(reference.encode(), password.encode())
        return ok and expected is not None


def authenticate(msg: WireMessage, registry: CredentialRegistry) -> bool:
    """True when the message carries valid credentials."""
    if not msg.auth:
        return False
    username, password = msg.auth
    return registry.verify(username, password)
