/**
 * Actuation helpers behind the valve slider and interval field.
 *
 * Bounds are checked here first; a value the server would refuse never
 * leaves the browser. A server-side 422 comes back as an inline message
 * and the request is not retried. Only a 2xx seeds a pending indicator.
 */

import { ApiClient, ApiError } from "./api.js";
import type { ViewModel } from "./state.js";

export interface ControlResult {
  ok: boolean;
  commandId?: number;
  error?: string;
}

export async function sendValve(
  api: ApiClient,
  vm: ViewModel,
  nodeId: string,
  targetOpening: number,
): Promise<ControlResult> {
  if (!Number.isFinite(targetOpening) || targetOpening < 0 || targetOpening > 1) {
    return { ok: false, error: `target ${targetOpening} outside [0, 1]` };
  }
  try {
    const reply = await api.setValve(nodeId, targetOpening);
    vm.registerPending(nodeId, reply.command_id, "set_valve", {
      target_opening: targetOpening,
    });
    return { ok: true, commandId: reply.command_id };
  } catch (err) {
    if (err instanceof ApiError) return { ok: false, error: err.message };
    throw err;
  }
}

export async function sendInterval(
  api: ApiClient,
  vm: ViewModel,
  nodeId: string,
  intervalMin: number,
  boundsMin: [number, number],
): Promise<ControlResult> {
  const [lo, hi] = boundsMin;
  if (!Number.isFinite(intervalMin) || intervalMin < lo || intervalMin > hi) {
    return { ok: false, error: `interval ${intervalMin} outside [${lo}, ${hi}]` };
  }
  try {
    const reply = await api.setSamplingInterval(nodeId, intervalMin);
    vm.registerPending(nodeId, reply.command_id, "set_sampling_interval", {
      sampling_interval_min: intervalMin,
    });
    return { ok: true, commandId: reply.command_id };
  } catch (err) {
    if (err instanceof ApiError) return { ok: false, error: err.message };
    throw err;
  }
}
