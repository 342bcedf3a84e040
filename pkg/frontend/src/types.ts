/** Wire shapes as served under /api/v1, plus console settings. */

export interface Settings {
  /** Base address, e.g. "http://127.0.0.1:8008". No trailing slash. */
  server: string;
  username: string;
  password: string;
  /** Allowed sampling interval range in minutes, checked before any request. */
  intervalBoundsMin: [number, number];
  /** Rolling chart window, in stream (simulation) milliseconds. */
  chartWindowMs: number;
  /** Banner flips to "stale" after this much wall time without a stream byte. */
  staleAfterMs: number;
}

export type NodeStatus = "healthy" | "warning" | "offline";

export interface NodeEntry {
  node_id: string;
  description: string;
  location: [number, number];
  last_seen: number | null;
  battery_v: number | null;
  signal_db: number | null;
  status: NodeStatus;
}

export type CommandState = "pending" | "delivered" | "acked" | "rejected";

export interface CommandDict {
  id: number;
  node_id: string;
  kind: string;
  payload: Record<string, unknown>;
  issued_at: number;
  state: CommandState;
  delivered_at: number | null;
  resolved_at: number | null;
  detail: string | null;
}

export interface AlertDict {
  fired_at: number;
  severity: string;
  subject: string;
  message: string;
}

export interface PointDict {
  series: string;
  timestamp_ms: number;
  value: number;
}

export type StreamEvent =
  | { kind: "point"; point: PointDict }
  | { kind: "alert"; alert: AlertDict }
  | { kind: "command"; command: CommandDict };
