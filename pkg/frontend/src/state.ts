/**
 * Console view model. Pure state, no DOM, no network.
 *
 * One rule is load-bearing: a command indicator may only read "acked" or
 * "rejected" once that resolution has actually been observed (stream event
 * or poll). "pending" and "delivered" both render as pending; delivery to
 * the queue is not enactment, the node still has to wake and apply it.
 */

import type {
  AlertDict,
  CommandDict,
  NodeEntry,
  PointDict,
  StreamEvent,
} from "./types.js";
import type { StreamStatus } from "./stream.js";

export type CommandPhase = "pending" | "acked" | "rejected";

export interface CommandIndicator {
  nodeId: string;
  commandId: number;
  kind: string;
  payload: Record<string, unknown>;
  issuedAt: number | null;
  phase: CommandPhase;
  resolvedAt: number | null;
  detail: string | null;
}

export type AlertBadge = "badge-critical" | "badge-warning" | "badge-info";

export interface AlertEntry {
  firedAt: number;
  severity: string;
  badge: AlertBadge;
  subject: string;
  message: string;
}

export interface ChartSeries {
  windowMs: number;
  /** Ascending by timestamp, one value per stamp. */
  points: [number, number][];
}

export function badgeFor(severity: string): AlertBadge {
  if (severity === "critical") return "badge-critical";
  if (severity === "warning") return "badge-warning";
  return "badge-info";
}

function phaseFor(state: CommandDict["state"]): CommandPhase {
  if (state === "acked") return "acked";
  if (state === "rejected") return "rejected";
  return "pending";
}

const ALERT_FEED_LIMIT = 200;

export class ViewModel {
  readonly nodes = new Map<string, NodeEntry>();
  readonly charts = new Map<string, ChartSeries>();
  readonly alerts: AlertEntry[] = [];
  readonly commands = new Map<string, CommandIndicator>();
  banner: StreamStatus = "connecting";

  setBanner(status: StreamStatus): void {
    this.banner = status;
  }

  setNodes(entries: NodeEntry[]): void {
    this.nodes.clear();
    for (const entry of entries) this.nodes.set(entry.node_id, entry);
  }

  trackSeries(series: string, windowMs: number): void {
    if (!this.charts.has(series)) {
      this.charts.set(series, { windowMs, points: [] });
    }
  }

  trackedSeries(): string[] {
    return [...this.charts.keys()];
  }

  seriesPoints(series: string): readonly [number, number][] {
    return this.charts.get(series)?.points ?? [];
  }

  applyEvent(event: StreamEvent): void {
    switch (event.kind) {
      case "point":
        this.applyPoint(event.point);
        return;
      case "alert":
        this.applyAlert(event.alert);
        return;
      case "command":
        this.applyCommand(event.command);
        return;
    }
  }

  applyPoint(point: PointDict): void {
    const chart = this.charts.get(point.series);
    if (!chart) return;
    this.mergeInto(chart, [[point.timestamp_ms, point.value]]);
  }

  /** Range-query results after a gap. Overlap with live points is deduped. */
  backfill(series: string, points: [number, number][]): void {
    const chart = this.charts.get(series);
    if (!chart) return;
    this.mergeInto(chart, points);
  }

  applyAlert(alert: AlertDict): void {
    this.alerts.unshift({
      firedAt: alert.fired_at,
      severity: alert.severity,
      badge: badgeFor(alert.severity),
      subject: alert.subject,
      message: alert.message,
    });
    if (this.alerts.length > ALERT_FEED_LIMIT) this.alerts.length = ALERT_FEED_LIMIT;
  }

  applyCommand(command: CommandDict): void {
    const key = `${command.node_id}#${command.id}`;
    const phase = phaseFor(command.state);
    const existing = this.commands.get(key);
    if (existing && existing.phase !== "pending" && phase === "pending") {
      // resolution already seen; a late or redelivered event cannot unring it
      return;
    }
    this.commands.set(key, {
      nodeId: command.node_id,
      commandId: command.id,
      kind: command.kind,
      payload: command.payload,
      issuedAt: command.issued_at,
      phase,
      resolvedAt: command.resolved_at,
      detail: command.detail,
    });
  }

  /** Seed an indicator straight from a POST reply, before any stream echo. */
  registerPending(
    nodeId: string,
    commandId: number,
    kind: string,
    payload: Record<string, unknown>,
  ): void {
    const key = `${nodeId}#${commandId}`;
    if (this.commands.has(key)) return;
    this.commands.set(key, {
      nodeId,
      commandId,
      kind,
      payload,
      issuedAt: null,
      phase: "pending",
      resolvedAt: null,
      detail: null,
    });
  }

  commandFor(nodeId: string, commandId: number): CommandIndicator | undefined {
    return this.commands.get(`${nodeId}#${commandId}`);
  }

  indicatorsFor(nodeId: string): CommandIndicator[] {
    const out: CommandIndicator[] = [];
    for (const ind of this.commands.values()) {
      if (ind.nodeId === nodeId) out.push(ind);
    }
    out.sort((a, b) => a.commandId - b.commandId);
    return out;
  }

  private mergeInto(chart: ChartSeries, incoming: [number, number][]): void {
    for (const [ts, value] of incoming) {
      const pts = chart.points;
      // fast path: appends dominate during live streaming
      if (pts.length === 0 || ts > pts[pts.length - 1][0]) {
        pts.push([ts, value]);
        continue;
      }
      const at = lowerBound(pts, ts);
      if (at < pts.length && pts[at][0] === ts) pts[at] = [ts, value];
      else pts.splice(at, 0, [ts, value]);
    }
    this.evict(chart);
  }

  private evict(chart: ChartSeries): void {
    const pts = chart.points;
    if (pts.length === 0) return;
    const horizon = pts[pts.length - 1][0] - chart.windowMs;
    let drop = 0;
    while (drop < pts.length && pts[drop][0] < horizon) drop += 1;
    if (drop > 0) pts.splice(0, drop);
  }
}

function lowerBound(points: [number, number][], ts: number): number {
  let lo = 0;
  let hi = points.length;
  while (lo < hi) {
    const mid = (lo + hi) >> 1;
    if (points[mid][0] < ts) lo = mid + 1;
    else hi = mid;
  }
  return lo;
}
