/**
 * Server-sent events intake.
 *
 * EventSource cannot carry an Authorization header, so the stream is read
 * through fetch and a hand-rolled frame parser. The reader owns exactly one
 * connection, reconnects with exponential backoff after a drop, and reports
 * liveness so the shell can hang a staleness banner when bytes stop.
 */

import type {
  AlertDict,
  CommandDict,
  PointDict,
  StreamEvent,
} from "./types.js";

export type StreamStatus = "connecting" | "live" | "reconnecting" | "stale";

export interface SseFrame {
  event: string;
  data: string;
}

/** Incremental SSE parser. Feed arbitrary chunk boundaries, get whole frames. */
export class SseParser {
  private buffer = "";

  feed(chunk: string): SseFrame[] {
    this.buffer += chunk;
    const frames: SseFrame[] = [];
    let cut: number;
    while ((cut = this.buffer.indexOf("\n\n")) >= 0) {
      const lines = this.buffer.slice(0, cut).split("\n");
      this.buffer = this.buffer.slice(cut + 2);
      let event = "message";
      const data: string[] = [];
      for (const line of lines) {
        if (line.startsWith(":")) continue; // comment, used as keepalive
        if (line.startsWith("event:")) event = line.slice(6).trim();
        else if (line.startsWith("data:")) data.push(line.slice(5).trimStart());
      }
      if (data.length > 0) frames.push({ event, data: data.join("\n") });
    }
    return frames;
  }
}

export function decodeFrame(frame: SseFrame): StreamEvent | null {
  let body: unknown;
  try {
    body = JSON.parse(frame.data);
  } catch {
    return null;
  }
  if (typeof body !== "object" || body === null) return null;
  switch (frame.event) {
    case "point":
      return { kind: "point", point: body as PointDict };
    case "alert":
      return { kind: "alert", alert: body as AlertDict };
    case "command":
      return { kind: "command", command: body as CommandDict };
    default:
      return null;
  }
}

export function backoffDelayMs(
  attempt: number,
  baseMs = 500,
  capMs = 15_000,
): number {
  return Math.min(capMs, baseMs * 2 ** attempt);
}

export interface ReaderHandlers {
  onEvent: (event: StreamEvent) => void;
  onStatus?: (status: StreamStatus) => void;
  /** Fires when a connection is re-established, i.e. history may have gaps. */
  onReconnect?: () => void;
}

export interface ReaderOptions {
  fetchFn?: (input: string, init?: RequestInit) => Promise<Response>;
  sleep?: (ms: number) => Promise<void>;
  now?: () => number;
  backoffBaseMs?: number;
  backoffCapMs?: number;
  staleAfterMs?: number;
}

const realSleep = (ms: number) =>
  new Promise<void>((resolve) => setTimeout(resolve, ms));

export class StreamReader {
  readonly delaysTaken: number[] = [];

  private readonly fetchFn: NonNullable<ReaderOptions["fetchFn"]>;
  private readonly sleep: (ms: number) => Promise<void>;
  private readonly now: () => number;
  private readonly baseMs: number;
  private readonly capMs: number;
  private readonly staleAfterMs: number;

  private status: StreamStatus = "connecting";
  private lastByteAt: number;
  private stopped = false;
  private controller: AbortController | null = null;
  private looping: Promise<void> | null = null;

  constructor(
    private readonly url: string,
    private readonly authHeader: string,
    private readonly handlers: ReaderHandlers,
    opts: ReaderOptions = {},
  ) {
    this.fetchFn = opts.fetchFn ?? ((input, init) => fetch(input, init));
    this.sleep = opts.sleep ?? realSleep;
    this.now = opts.now ?? Date.now;
    this.baseMs = opts.backoffBaseMs ?? 500;
    this.capMs = opts.backoffCapMs ?? 15_000;
    this.staleAfterMs = opts.staleAfterMs ?? 45_000;
    this.lastByteAt = this.now();
  }

  start(): Promise<void> {
    if (this.looping) return this.looping;
    this.looping = this.loop();
    return this.looping;
  }

  stop(): void {
    this.stopped = true;
    this.controller?.abort();
  }

  currentStatus(): StreamStatus {
    return this.status;
  }

  /** True when connected but silent past the configured horizon. */
  isStale(): boolean {
    return (
      this.status === "live" &&
      this.now() - this.lastByteAt > this.staleAfterMs
    );
  }

  private setStatus(status: StreamStatus): void {
    if (status === this.status) return;
    this.status = status;
    this.handlers.onStatus?.(status);
  }

  private async loop(): Promise<void> {
    let attempt = 0;
    let everConnected = false;
    while (!this.stopped) {
      this.controller = new AbortController();
      try {
        const resp = await this.fetchFn(this.url, {
          headers: { Authorization: this.authHeader, Accept: "text/event-stream" },
          signal: this.controller.signal,
        });
        if (!resp.ok || !resp.body) throw new Error(`stream ${resp.status}`);
        if (everConnected) this.handlers.onReconnect?.();
        everConnected = true;
        attempt = 0;
        this.lastByteAt = this.now();
        this.setStatus("live");
        await this.pump(resp.body);
      } catch {
        // fall through to the retry wait
      }
      if (this.stopped) break;
      this.setStatus("reconnecting");
      await this.sleepBeforeRetry(attempt);
      attempt += 1;
    }
  }

  private async pump(body: ReadableStream<Uint8Array>): Promise<void> {
    const parser = new SseParser(); // frames never span connections
    const reader = body.getReader();
    const decoder = new TextDecoder();
    try {
      for (;;) {
        const { done, value } = await reader.read();
        if (done || this.stopped) return;
        this.lastByteAt = this.now();
        const text = decoder.decode(value, { stream: true });
        for (const frame of parser.feed(text)) {
          const event = decodeFrame(frame);
          if (event) this.handlers.onEvent(event);
        }
      }
    } finally {
      reader.releaseLock();
    }
  }

  private async sleepBeforeRetry(attempt: number): Promise<void> {
    const delay = backoffDelayMs(attempt, this.baseMs, this.capMs);
    this.delaysTaken.push(delay);
    await this.sleep(delay);
  }
}
