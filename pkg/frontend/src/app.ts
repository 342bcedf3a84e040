/**
 * Browser shell. Wires settings, the API client, one stream reader, and the
 * view model into a plain-DOM page: fleet list with battery gauges, rolling
 * charts, command indicators, and the alert feed.
 *
 * Rendering is deliberately dumb: events mark the page dirty and a short
 * interval repaints everything from the view model. No virtual DOM, no
 * per-widget updates, and no optimistic state anywhere.
 */

import { ApiClient, ApiError } from "./api.js";
import { gaugeArc, polylinePoints } from "./charts.js";
import { sendInterval, sendValve } from "./controls.js";
import { ViewModel } from "./state.js";
import { StreamReader } from "./stream.js";
import type { Settings } from "./types.js";

const CHART_W = 640;
const CHART_H = 180;
const BATTERY_RANGE: [number, number] = [3.0, 4.2];

async function loadSettings(): Promise<Settings> {
  const resp = await fetch("settings.json");
  if (!resp.ok) throw new Error(`settings.json: ${resp.status}`);
  return (await resp.json()) as Settings;
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  cls?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (cls) node.className = cls;
  if (text !== undefined) node.textContent = text;
  return node;
}

class App {
  private readonly vm = new ViewModel();
  private readonly api: ApiClient;
  private readonly reader: StreamReader;
  private dirty = true;
  private selectedSeries: string | null = null;
  private readonly inlineErrors = new Map<string, string>();

  constructor(private readonly settings: Settings, private readonly root: HTMLElement) {
    this.api = new ApiClient(settings);
    this.reader = new StreamReader(
      this.api.streamUrl(),
      this.api.authHeader(),
      {
        onEvent: (event) => {
          this.vm.applyEvent(event);
          this.dirty = true;
        },
        onStatus: (status) => {
          this.vm.setBanner(status);
          this.dirty = true;
        },
        onReconnect: () => void this.backfillAll(),
      },
      { staleAfterMs: settings.staleAfterMs },
    );
  }

  async start(): Promise<void> {
    void this.reader.start();
    await this.refreshNodes();
    await this.seedAlerts();
    setInterval(() => void this.refreshNodes(), 10_000);
    setInterval(() => this.checkStale(), 1_000);
    setInterval(() => this.paint(), 250);
    this.paint();
  }

  private checkStale(): void {
    if (this.reader.isStale() && this.vm.banner === "live") {
      this.vm.setBanner("stale");
      this.dirty = true;
    } else if (!this.reader.isStale() && this.vm.banner === "stale") {
      this.vm.setBanner(this.reader.currentStatus());
      this.dirty = true;
    }
  }

  private async refreshNodes(): Promise<void> {
    try {
      this.vm.setNodes(await this.api.nodes());
      this.dirty = true;
    } catch {
      // transient; the staleness banner covers prolonged silence
    }
  }

  private async seedAlerts(): Promise<void> {
    try {
      const past = await this.api.alerts(0);
      for (const alert of past) this.vm.applyAlert(alert);
      this.dirty = true;
    } catch {
      // feed fills from the stream regardless
    }
  }

  private async trackSeries(series: string): Promise<void> {
    this.vm.trackSeries(series, this.settings.chartWindowMs);
    this.selectedSeries = series;
    await this.backfillOne(series);
    this.dirty = true;
  }

  private async backfillOne(series: string): Promise<void> {
    try {
      const points = await this.api.query(series, 0);
      this.vm.backfill(series, points);
      this.dirty = true;
    } catch {
      // chart keeps whatever the stream delivered
    }
  }

  private async backfillAll(): Promise<void> {
    for (const series of this.vm.trackedSeries()) await this.backfillOne(series);
  }

  private async actuate(action: () => Promise<{ ok: boolean; error?: string }>, errKey: string) {
    this.inlineErrors.delete(errKey);
    const result = await action();
    if (!result.ok) this.inlineErrors.set(errKey, result.error ?? "failed");
    this.dirty = true;
  }

  private paint(): void {
    if (!this.dirty) return;
    this.dirty = false;
    const next = el("div", "console");
    next.append(this.renderBanner(), this.renderNodes(), this.renderChart(), this.renderAlerts());
    this.root.replaceChildren(next);
  }

  private renderBanner(): HTMLElement {
    const banner = el("div", `banner banner-${this.vm.banner}`);
    banner.append(el("span", "banner-label", `stream: ${this.vm.banner}`));
    if (this.vm.banner === "stale" || this.vm.banner === "reconnecting") {
      banner.append(
        el("span", "banner-note", "charts may lag; they resync automatically"),
      );
    }
    return banner;
  }

  private renderNodes(): HTMLElement {
    // no map tiles offline, so the fleet renders as a list with coordinates
    const wrap = el("section", "nodes");
    wrap.append(el("h2", undefined, "fleet"));
    for (const node of this.vm.nodes.values()) {
      const card = el("div", `node node-${node.status}`);
      const head = el("div", "node-head");
      head.append(
        el("span", "node-id", node.node_id),
        el("span", `status status-${node.status}`, node.status),
      );
      card.append(head);
      card.append(el("div", "node-desc", node.description));
      card.append(
        el(
          "div",
          "node-loc",
          `${node.location[0].toFixed(4)}, ${node.location[1].toFixed(4)}`,
        ),
      );
      card.append(this.renderBattery(node.battery_v));
      card.append(
        el(
          "div",
          "node-signal",
          node.signal_db === null ? "signal: n/a" : `signal: ${node.signal_db.toFixed(1)} dB`,
        ),
      );
      card.append(this.renderSensors(node.node_id));
      card.append(this.renderControls(node.node_id));
      card.append(this.renderIndicators(node.node_id));
      wrap.append(card);
    }
    return wrap;
  }

  private renderBattery(batteryV: number | null): HTMLElement {
    const wrap = el("div", "battery");
    if (batteryV === null) {
      wrap.textContent = "battery: n/a";
      return wrap;
    }
    const [lo, hi] = BATTERY_RANGE;
    const frac = (batteryV - lo) / (hi - lo);
    const svg = document.createElementNS("http://www.w3.org/2000/svg", "svg");
    svg.setAttribute("viewBox", "0 0 64 36");
    svg.setAttribute("class", "gauge");
    const track = document.createElementNS("http://www.w3.org/2000/svg", "path");
    track.setAttribute("d", gaugeArc(1, 32, 32, 26));
    track.setAttribute("class", "gauge-track");
    const fill = document.createElementNS("http://www.w3.org/2000/svg", "path");
    fill.setAttribute("d", gaugeArc(frac, 32, 32, 26));
    fill.setAttribute("class", frac < 0.3 ? "gauge-fill gauge-low" : "gauge-fill");
    svg.append(track, fill);
    wrap.append(svg, el("span", "battery-v", `${batteryV.toFixed(2)} V`));
    return wrap;
  }

  private renderSensors(nodeId: string): HTMLElement {
    const row = el("div", "sensors");
    for (const quantity of ["depth", "flow", "rain"]) {
      const series = `${quantity},node=${nodeId}`;
      const btn = el("button", "chip", quantity);
      btn.addEventListener("click", () => void this.trackSeries(series));
      row.append(btn);
    }
    return row;
  }

  private renderControls(nodeId: string): HTMLElement {
    const wrap = el("div", "controls");

    const valveRow = el("div", "control-row");
    const slider = el("input") as HTMLInputElement;
    slider.type = "range";
    slider.min = "0";
    slider.max = "1";
    slider.step = "0.05";
    slider.value = "0.5";
    const valveBtn = el("button", undefined, "set valve");
    const valveErrKey = `${nodeId}:valve`;
    valveBtn.addEventListener("click", () =>
      void this.actuate(
        () => sendValve(this.api, this.vm, nodeId, Number(slider.value)),
        valveErrKey,
      ),
    );
    valveRow.append(slider, valveBtn);
    const valveErr = this.inlineErrors.get(valveErrKey);
    if (valveErr) valveRow.append(el("span", "inline-error", valveErr));
    wrap.append(valveRow);

    const intervalRow = el("div", "control-row");
    const field = el("input") as HTMLInputElement;
    field.type = "number";
    field.placeholder = "interval (min)";
    const intervalBtn = el("button", undefined, "set interval");
    const intervalErrKey = `${nodeId}:interval`;
    intervalBtn.addEventListener("click", () =>
      void this.actuate(
        () =>
          sendInterval(
            this.api,
            this.vm,
            nodeId,
            Number(field.value),
            this.settings.intervalBoundsMin,
          ),
        intervalErrKey,
      ),
    );
    intervalRow.append(field, intervalBtn);
    const intervalErr = this.inlineErrors.get(intervalErrKey);
    if (intervalErr) intervalRow.append(el("span", "inline-error", intervalErr));
    wrap.append(intervalRow);

    return wrap;
  }

  private renderIndicators(nodeId: string): HTMLElement {
    const wrap = el("div", "indicators");
    for (const ind of this.vm.indicatorsFor(nodeId).slice(-6)) {
      const label = `#${ind.commandId} ${ind.kind}`;
      const badge = el("span", `indicator indicator-${ind.phase}`, `${label}: ${ind.phase}`);
      if (ind.detail) badge.title = ind.detail;
      wrap.append(badge);
    }
    return wrap;
  }

  private renderChart(): HTMLElement {
    const wrap = el("section", "chart-panel");
    wrap.append(el("h2", undefined, "series"));
    const picker = el("div", "chips");
    for (const series of this.vm.trackedSeries()) {
      const chip = el(
        "button",
        series === this.selectedSeries ? "chip chip-active" : "chip",
        series,
      );
      chip.addEventListener("click", () => {
        this.selectedSeries = series;
        this.dirty = true;
      });
      picker.append(chip);
    }
    wrap.append(picker);

    if (this.selectedSeries) {
      const points = this.vm.seriesPoints(this.selectedSeries);
      const svg = document.createElementNS("http://www.w3.org/2000/svg", "svg");
      svg.setAttribute("viewBox", `0 0 ${CHART_W} ${CHART_H}`);
      svg.setAttribute("class", "chart");
      const line = document.createElementNS("http://www.w3.org/2000/svg", "polyline");
      line.setAttribute("points", polylinePoints(points, CHART_W, CHART_H));
      line.setAttribute("class", "chart-line");
      svg.append(line);
      wrap.append(svg);
      wrap.append(el("div", "chart-meta", `${points.length} points`));
    } else {
      wrap.append(el("div", "chart-empty", "pick a series above"));
    }
    return wrap;
  }

  private renderAlerts(): HTMLElement {
    const wrap = el("section", "alerts");
    wrap.append(el("h2", undefined, "alerts"));
    const list = el("ul", "alert-list");
    for (const alert of this.vm.alerts.slice(0, 40)) {
      const item = el("li", "alert");
      item.append(
        el("span", `badge ${alert.badge}`, alert.severity),
        el("span", "alert-subject", alert.subject),
        el("span", "alert-message", alert.message),
        el("span", "alert-time", new Date(alert.firedAt).toISOString()),
      );
      list.append(item);
    }
    wrap.append(list);
    return wrap;
  }
}

async function main(): Promise<void> {
  const root = document.getElementById("app");
  if (!root) throw new Error("missing #app mount point");
  try {
    const settings = await loadSettings();
    const app = new App(settings, root);
    await app.start();
  } catch (err) {
    const message = err instanceof ApiError ? err.message : String(err);
    root.replaceChildren(el("div", "fatal", `console failed to start: ${message}`));
  }
}

void main();
