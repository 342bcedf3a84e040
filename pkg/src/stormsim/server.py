"""HTTP face of the platform: ingest, queries, command queue, live stream.

Runs either against a live simulation (serve mode, virtual clock) or any
datastore. Every endpoint sits behind Basic auth; a rejected request leaves
the store untouched, byte for byte. The dashboard never reaches into the
water model: the only way an operator action affects anything physical is a
command queued here and fetched by the node on its own schedule.

Routes (all under /api/v1):
    POST /write                  line-format points; all-or-nothing
    GET  /commands/<node_id>     pending commands, marks them delivered
    POST /ack                    resolve one delivered command
    GET  /query?series=&start=&end=
    GET  /nodes                  registry with health rollup
    POST /nodes/<id>/config      queue a sampling-interval change
    POST /nodes/<id>/valve       queue a valve move
    GET  /alerts?since=
    GET  /export                 full dump in wire format (operator)
    GET  /stream                 server-sent events: point/alert/command
"""

from __future__ import annotations

import base64
import json
import queue
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Any, Callable, Optional
from urllib.parse import parse_qs, urlparse

from .datastore import AlertRecord, Command, CommandKind, DataStore, Point, SeriesKey
from .node import HEALTH_SENSORS
from .scenario import MS_PER_MIN, NodeSpec
from .telemetry import CredentialRegistry, ProtocolError, decode_points

OPERATOR_USERNAME = "operator"
LOW_BATTERY_V = 3.4
OFFLINE_AFTER_WINDOWS = 3
STREAM_QUEUE_LIMIT = 1000


@dataclass
class NodeRegistryEntry:
    node_id: str
    description: str
    location: tuple[float, float]
    last_seen: Optional[int] = None
    battery_v: Optional[float] = None
    signal_db: Optional[float] = None
    status: str = "offline"  # healthy | warning | offline

    def as_dict(self) -> dict[str, Any]:
        return {
            "node_id": self.node_id, "description": self.description,
            "location": list(self.location), "last_seen": self.last_seen,
            "battery_v": self.battery_v, "signal_db": self.signal_db,
            "status": self.status,
        }


class NodeRegistry:
    """Fleet health rollup, fed by the store's point hook.

    ``intervals_view`` (when given) reads the live per-node sampling
    intervals, so a node that a subscription just slowed down is not
    misjudged offline against its old, faster cadence.
    """

    def __init__(self, node_specs: dict[str, NodeSpec],
                 clock: Callable[[], int],
                 intervals_view: Optional[
                     Callable[[], dict[str, float]]] = None):
        self._clock = clock
        self._intervals_view = intervals_view
        self._intervals = {nid: spec.config.sampling_interval_min
                           for nid, spec in node_specs.items()}
        self._entries = {
            nid: NodeRegistryEntry(
                node_id=nid, description=spec.description,
                location=spec.location)
            for nid, spec in node_specs.items()}
        self._lock = threading.Lock()

    def observe_point(self, point: Point) -> None:
        with self._lock:
            entry = self._entries.get(point.series.node_id)
            if entry is None:
                return
            if entry.last_seen is None or point.timestamp_ms > entry.last_seen:
                entry.last_seen = point.timestamp_ms
            if point.series.sensor_id == "battery_v":
                entry.battery_v = point.value
            elif point.series.sensor_id == "signal_db":
                entry.signal_db = point.value

    def set_interval(self, node_id: str, minutes: float) -> None:
        with self._lock:
            self._intervals[node_id] = minutes

    def snapshot(self) -> list[dict[str, Any]]:
        now = self._clock()
        if self._intervals_view is not None:
            self._intervals.update(self._intervals_view())
        with self._lock:
            out = []
            for nid, entry in self._entries.items():
                window_ms = self._intervals[nid] * MS_PER_MIN
                if entry.last_seen is None or \
                        now - entry.last_seen > OFFLINE_AFTER_WINDOWS * window_ms:
                    entry.status = "offline"
                elif entry.battery_v is not None and \
                        entry.battery_v < LOW_BATTERY_V:
                    entry.status = "warning"
                else:
                    entry.status = "healthy"
                out.append(entry.as_dict())
            return out


@dataclass
class _Subscriber:
    events: "queue.Queue[Optional[tuple[str, dict]]]" = field(
        default_factory=lambda: queue.Queue(maxsize=STREAM_QUEUE_LIMIT))
    dead: bool = False


class ApiServer:
    """Threaded HTTP server bound to one datastore and registry."""

    def __init__(self, store: DataStore, registry: CredentialRegistry,
                 node_specs: dict[str, NodeSpec],
                 clock: Callable[[], int],
                 operator_password: str = "stormwatch",
                 listen: tuple[str, int] = ("127.0.0.1", 0),
                 intervals_view: Optional[
                     Callable[[], dict[str, float]]] = None):
        self.store = store
        self.credentials = registry
        self.credentials.add(OPERATOR_USERNAME, operator_password)
        self.node_specs = node_specs
        self.clock = clock
        self.nodes = NodeRegistry(node_specs, clock, intervals_view)
        self._subscribers: list[_Subscriber] = []
        self._sub_lock = threading.Lock()
        self._stopping = threading.Event()
        store.on_point.append(self.nodes.observe_point)
        store.on_point.append(self._stream_point)
        store.on_alert.append(self._stream_alert)
        store.on_command.append(self._stream_command)

        handler = _build_handler(self)
        self._httpd = ThreadingHTTPServer(listen, handler)
        self._httpd.daemon_threads = True
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> tuple[str, int]:
        host, port = self._httpd.server_address[:2]
        return str(host), int(port)

    def start(self) -> None:
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, kwargs={"poll_interval": 0.1},
            daemon=True, name="stormsim-api")
        self._thread.start()

    def stop(self) -> None:
        self._stopping.set()
        with self._sub_lock:
            for sub in self._subscribers:
                sub.dead = True
                try:
                    sub.events.put_nowait(None)
                except queue.Full:
                    pass
        self._httpd.shutdown()
        if self._thread is not None:
            self._thread.join(timeout=5)
        self._httpd.server_close()

    # streaming fanout -----------------------------------------------------

    def subscribe(self) -> _Subscriber:
        sub = _Subscriber()
        with self._sub_lock:
            self._subscribers.append(sub)
        return sub

    def unsubscribe(self, sub: _Subscriber) -> None:
        with self._sub_lock:
            if sub in self._subscribers:
                self._subscribers.remove(sub)

    def _publish(self, kind: str, payload: dict) -> None:
        with self._sub_lock:
            subs = list(self._subscribers)
        for sub in subs:
            try:
                sub.events.put_nowait((kind, payload))
            except queue.Full:
                # slow consumer: cut it off, the client re-syncs via /query
                sub.dead = True
                try:
                    sub.events.put_nowait(None)
                except queue.Full:
                    pass

    def _stream_point(self, point: Point) -> None:
        self._publish("point", {
            "series": str(point.series), "timestamp_ms": point.timestamp_ms,
            "value": point.value})

    def _stream_alert(self, alert: AlertRecord) -> None:
        self._publish("alert", {
            "fired_at": alert.fired_at, "severity": alert.severity,
            "subject": alert.subject, "message": alert.message})

    def _stream_command(self, command: Command) -> None:
        self._publish("command", _command_dict(command))


def _command_dict(cmd: Command) -> dict[str, Any]:
    return {
        "id": cmd.id, "node_id": cmd.node_id, "kind": cmd.kind.value,
        "payload": cmd.payload, "issued_at": cmd.issued_at,
        "state": cmd.state.value, "delivered_at": cmd.delivered_at,
        "resolved_at": cmd.resolved_at, "detail": cmd.detail,
    }


def _build_handler(api: ApiServer):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        server_version = "stormsim"

        # ---- plumbing

        def log_message(self, *args) -> None:  # keep stdout clean
            pass

        def _send_json(self, status: int, payload: Any) -> None:
            body = json.dumps(payload, sort_keys=True).encode()
            self.send_response(status)
            self._cors()
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _cors(self) -> None:
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Access-Control-Allow-Headers",
                             "Authorization, Content-Type")
            self.send_header("Access-Control-Allow-Methods",
                             "GET, POST, OPTIONS")

        def _principal(self) -> Optional[str]:
            """Authenticated username, or None (401 already sent)."""
            header = self.headers.get("Authorization", "")
            if header.startswith("Basic "):
                try:
                    raw = base64.b64decode(header[6:]).decode()
                    username, _, password = raw.partition(":")
                except Exception:
                    username, password = "", ""
                if api.credentials.verify(username, password):
                    return username
            self.send_response(401)
            self._cors()
            self.send_header("WWW-Authenticate", 'Basic realm="stormsim"')
            body = b'{"error": "authentication required"}'
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)
            return None

        def _body(self) -> bytes:
            length = int(self.headers.get("Content-Length") or 0)
            return self.rfile.read(length) if length else b""

        def _json_body(self) -> Optional[dict]:
            try:
                parsed = json.loads(self._body().decode() or "{}")
                if not isinstance(parsed, dict):
                    raise ValueError("body must be a JSON object")
                return parsed
            except (ValueError, UnicodeDecodeError) as exc:
                self._send_json(400, {"error": f"bad request body: {exc}"})
                return None

        # ---- verbs

        def do_OPTIONS(self) -> None:
            self.send_response(204)
            self._cors()
            self.send_header("Content-Length", "0")
            self.end_headers()

        def do_GET(self) -> None:
            url = urlparse(self.path)
            parts = [p for p in url.path.split("/") if p]
            if len(parts) < 3 or parts[0] != "api" or parts[1] != "v1":
                self._send_json(404, {"error": "unknown endpoint"})
                return
            principal = self._principal()
            if principal is None:
                return
            params = parse_qs(url.query)
            route = parts[2:]
            if route == ["query"]:
                self._get_query(params)
            elif route == ["nodes"]:
                self._send_json(200, {"nodes": api.nodes.snapshot()})
            elif route == ["alerts"]:
                since = int(params.get("since", ["0"])[0])
                self._send_json(200, {"alerts": [
                    {"fired_at": a.fired_at, "severity": a.severity,
                     "subject": a.subject, "message": a.message}
                    for a in api.store.alerts_since(since)]})
            elif route == ["export"]:
                if principal != OPERATOR_USERNAME:
                    self._send_json(403, {"error": "operator only"})
                    return
                blob = api.store.dump_bytes()
                self.send_response(200)
                self._cors()
                self.send_header("Content-Type", "text/plain; charset=utf-8")
                self.send_header("Content-Length", str(len(blob)))
                self.end_headers()
                self.wfile.write(blob)
            elif route == ["stream"]:
                self._get_stream()
            elif len(route) == 2 and route[0] == "commands":
                self._get_commands(principal, route[1])
            else:
                self._send_json(404, {"error": "unknown endpoint"})

        def do_POST(self) -> None:
            url = urlparse(self.path)
            parts = [p for p in url.path.split("/") if p]
            if len(parts) < 3 or parts[0] != "api" or parts[1] != "v1":
                self._send_json(404, {"error": "unknown endpoint"})
                return
            principal = self._principal()
            if principal is None:
                return
            route = parts[2:]
            if route == ["write"]:
                self._post_write()
            elif route == ["ack"]:
                self._post_ack(principal)
            elif len(route) == 3 and route[0] == "nodes" \
                    and route[2] == "config":
                self._post_config(route[1])
            elif len(route) == 3 and route[0] == "nodes" \
                    and route[2] == "valve":
                self._post_valve(route[1])
            else:
                self._send_json(404, {"error": "unknown endpoint"})

        # ---- GET handlers

        def _get_query(self, params: dict[str, list[str]]) -> None:
            try:
                series = SeriesKey.parse(params["series"][0])
                start = int(params.get("start", ["0"])[0])
                end = int(params.get("end", [str(2 ** 62)])[0])
            except (KeyError, ValueError, IndexError) as exc:
                self._send_json(400, {"error": f"bad query: {exc}"})
                return
            try:
                points = api.store.query_range(series, start, end)
            except ValueError as exc:
                self._send_json(400, {"error": str(exc)})
                return
            self._send_json(200, {
                "series": str(series),
                "points": [[p.timestamp_ms, p.value] for p in points]})

        def _get_commands(self, principal: str, node_id: str) -> None:
            if principal not in (OPERATOR_USERNAME, node_id):
                self._send_json(403, {"error": "not your queue"})
                return
            if node_id not in api.node_specs:
                self._send_json(404, {"error": f"unknown node {node_id!r}"})
                return
            commands = api.store.fetch_pending(node_id, api.clock())
            self._send_json(200, {
                "commands": [_command_dict(c) for c in commands]})

        def _get_stream(self) -> None:
            sub = api.subscribe()
            try:
                self.send_response(200)
                self._cors()
                self.send_header("Content-Type", "text/event-stream")
                self.send_header("Cache-Control", "no-cache")
                self.end_headers()
                self.wfile.write(b": connected\n\n")
                self.wfile.flush()
                while not api._stopping.is_set() and not sub.dead:
                    try:
                        item = sub.events.get(timeout=15.0)
                    except queue.Empty:
                        self.wfile.write(b": keepalive\n\n")
                        self.wfile.flush()
                        continue
                    if item is None:
                        break
                    kind, payload = item
                    data = json.dumps(payload, sort_keys=True)
                    self.wfile.write(
                        f"event: {kind}\ndata: {data}\n\n".encode())
                    self.wfile.flush()
            except (BrokenPipeError, ConnectionResetError, OSError):
                pass  # client went away; normal for streams
            finally:
                api.unsubscribe(sub)

        # ---- POST handlers

        def _post_write(self) -> None:
            try:
                text = self._body().decode()
            except UnicodeDecodeError:
                self._send_json(400, {"error": "body is not utf-8"})
                return
            try:
                points = decode_points(text)
            except ProtocolError as exc:
                # nothing from a malformed batch lands, not even good lines
                self._send_json(400, {"error": str(exc), "line": exc.line})
                return
            result = api.store.write_points(points)
            self._send_json(200, {
                "written": result.written,
                "rejected": [[i, reason] for i, reason in result.rejected]})

        def _post_ack(self, principal: str) -> None:
            body = self._json_body()
            if body is None:
                return
            node_id = str(body.get("node_id", ""))
            if principal not in (OPERATOR_USERNAME, node_id):
                self._send_json(403, {"error": "not your queue"})
                return
            try:
                command_id = int(body["command_id"])
                outcome = str(body["outcome"])
            except (KeyError, ValueError) as exc:
                self._send_json(400, {"error": f"bad ack: {exc}"})
                return
            try:
                state = api.store.ack(node_id, command_id, outcome,
                                      api.clock(), body.get("detail"))
            except KeyError as exc:
                self._send_json(404, {"error": str(exc.args[0])})
                return
            except ValueError as exc:
                self._send_json(409, {"error": str(exc)})
                return
            self._send_json(200, {"state": state.value})

        def _post_config(self, node_id: str) -> None:
            spec = api.node_specs.get(node_id)
            if spec is None:
                self._send_json(404, {"error": f"unknown node {node_id!r}"})
                return
            body = self._json_body()
            if body is None:
                return
            try:
                minutes = float(body["sampling_interval_min"])
            except (KeyError, TypeError, ValueError):
                self._send_json(400,
                                {"error": "sampling_interval_min required"})
                return
            lo = spec.config.min_interval_min
            hi = spec.config.max_interval_min
            if not lo <= minutes <= hi:
                self._send_json(422, {
                    "error": f"interval {minutes} outside [{lo}, {hi}]"})
                return
            command_id = api.store.enqueue_command(
                node_id, CommandKind.SET_SAMPLING_INTERVAL, minutes,
                api.clock())
            api.nodes.set_interval(node_id, minutes)
            self._send_json(200, {"command_id": command_id,
                                  "state": "pending"})

        def _post_valve(self, node_id: str) -> None:
            spec = api.node_specs.get(node_id)
            if spec is None:
                self._send_json(404, {"error": f"unknown node {node_id!r}"})
                return
            if spec.config.valve_element is None:
                self._send_json(409,
                                {"error": f"node {node_id} has no valve"})
                return
            body = self._json_body()
            if body is None:
                return
            try:
                target = float(body["target_opening"])
            except (KeyError, TypeError, ValueError):
                self._send_json(400, {"error": "target_opening required"})
                return
            if not 0.0 <= target <= 1.0:
                self._send_json(422, {
                    "error": f"target {target} outside [0, 1]"})
                return
            command_id = api.store.enqueue_command(
                node_id, CommandKind.SET_VALVE, target, api.clock())
            self._send_json(200, {"command_id": command_id,
                                  "state": "pending"})

    return Handler
