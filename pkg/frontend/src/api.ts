/** Typed client for the /api/v1 surface. One instance per configured server. */

import type {
  AlertDict,
  CommandDict,
  NodeEntry,
  Settings,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

export interface EnqueueReply {
  command_id: number;
  state: string;
}

type FetchLike = (
  input: string,
  init?: RequestInit,
) => Promise<Response>;

export class ApiClient {
  private readonly base: string;
  private readonly auth: string;
  private readonly fetchFn: FetchLike;

  constructor(settings: Settings, fetchFn?: FetchLike) {
    this.base = settings.server.replace(/\/+$/, "") + "/api/v1";
    this.auth = "Basic " + btoa(`${settings.username}:${settings.password}`);
    // bind: a bare global fetch loses its receiver when called as a method
    this.fetchFn = fetchFn ?? ((input, init) => fetch(input, init));
  }

  authHeader(): string {
    return this.auth;
  }

  streamUrl(): string {
    return this.base + "/stream";
  }

  private async request<T>(
    method: string,
    path: string,
    body?: unknown,
  ): Promise<T> {
    const init: RequestInit = {
      method,
      headers: { Authorization: this.auth },
    };
    if (body !== undefined) {
      init.headers = {
        ...(init.headers as Record<string, string>),
        "Content-Type": "application/json",
      };
      init.body = JSON.stringify(body);
    }
    const resp = await this.fetchFn(this.base + path, init);
    const text = await resp.text();
    let parsed: unknown = null;
    if (text) {
      try {
        parsed = JSON.parse(text);
      } catch {
        parsed = null;
      }
    }
    if (!resp.ok) {
      const detail =
        parsed && typeof parsed === "object" && "error" in parsed
          ? String((parsed as { error: unknown }).error)
          : `request failed (${resp.status})`;
      throw new ApiError(resp.status, detail);
    }
    return parsed as T;
  }

  async nodes(): Promise<NodeEntry[]> {
    const reply = await this.request<{ nodes: NodeEntry[] }>("GET", "/nodes");
    return reply.nodes;
  }

  /** Range read, half-open: startMs <= t < endMs. Omit endMs for "to now". */
  async query(
    series: string,
    startMs = 0,
    endMs?: number,
  ): Promise<[number, number][]> {
    const params = new URLSearchParams({ series, start: String(startMs) });
    if (endMs !== undefined) params.set("end", String(endMs));
    const reply = await this.request<{ points: [number, number][] }>(
      "GET",
      "/query?" + params.toString(),
    );
    return reply.points;
  }

  async alerts(sinceMs = 0): Promise<AlertDict[]> {
    const reply = await this.request<{ alerts: AlertDict[] }>(
      "GET",
      `/alerts?since=${sinceMs}`,
    );
    return reply.alerts;
  }

  /**
   * Drain the delivery queue for one node. The server treats this GET as
   * the delivery channel: returned commands flip to "delivered", so poll
   * sparingly or the node itself sees them a redelivery window later.
   */
  async commandsFor(nodeId: string): Promise<CommandDict[]> {
    const reply = await this.request<{ commands: CommandDict[] }>(
      "GET",
      `/commands/${encodeURIComponent(nodeId)}`,
    );
    return reply.commands;
  }

  async setValve(nodeId: string, targetOpening: number): Promise<EnqueueReply> {
    return this.request<EnqueueReply>(
      "POST",
      `/nodes/${encodeURIComponent(nodeId)}/valve`,
      { target_opening: targetOpening },
    );
  }

  async setSamplingInterval(
    nodeId: string,
    intervalMin: number,
  ): Promise<EnqueueReply> {
    return this.request<EnqueueReply>(
      "POST",
      `/nodes/${encodeURIComponent(nodeId)}/config`,
      { sampling_interval_min: intervalMin },
    );
  }
}
