/** Geometry helpers for the SVG charts and gauges. No DOM here. */

export interface Extent {
  tMin: number;
  tMax: number;
  vMin: number;
  vMax: number;
}

export function extentOf(points: readonly [number, number][]): Extent | null {
  if (points.length === 0) return null;
  let tMin = points[0][0];
  let tMax = points[0][0];
  let vMin = points[0][1];
  let vMax = points[0][1];
  for (const [t, v] of points) {
    if (t < tMin) tMin = t;
    if (t > tMax) tMax = t;
    if (v < vMin) vMin = v;
    if (v > vMax) vMax = v;
  }
  return { tMin, tMax, vMin, vMax };
}

/**
 * Map a series onto an SVG polyline "x,y x,y ..." string. Value axis is
 * inverted (SVG y grows downward). Degenerate extents collapse to midlines.
 */
export function polylinePoints(
  points: readonly [number, number][],
  width: number,
  height: number,
  pad = 4,
): string {
  const ext = extentOf(points);
  if (!ext) return "";
  const spanT = ext.tMax - ext.tMin;
  const spanV = ext.vMax - ext.vMin;
  const innerW = width - 2 * pad;
  const innerH = height - 2 * pad;
  const coords: string[] = [];
  for (const [t, v] of points) {
    const x = spanT === 0 ? width / 2 : pad + ((t - ext.tMin) / spanT) * innerW;
    const y =
      spanV === 0 ? height / 2 : pad + (1 - (v - ext.vMin) / spanV) * innerH;
    coords.push(`${round2(x)},${round2(y)}`);
  }
  return coords.join(" ");
}

/** Axis tick values: count+1 evenly spaced stops from min to max inclusive. */
export function ticks(min: number, max: number, count: number): number[] {
  if (count < 1 || max < min) return [min];
  const out: number[] = [];
  for (let i = 0; i <= count; i += 1) {
    out.push(min + ((max - min) * i) / count);
  }
  return out;
}

/**
 * Arc path for a half-circle gauge, sweeping left (empty) to right (full).
 * Fraction is clamped to [0, 1]; NaN renders as empty.
 */
export function gaugeArc(
  fraction: number,
  cx: number,
  cy: number,
  radius: number,
): string {
  const f = Number.isFinite(fraction) ? Math.min(1, Math.max(0, fraction)) : 0;
  const angle = Math.PI * (1 - f); // pi at empty, 0 at full
  const x = cx + radius * Math.cos(angle);
  const y = cy - radius * Math.sin(angle);
  const large = 0; // half circle never exceeds 180 degrees
  return `M ${cx - radius} ${cy} A ${radius} ${radius} 0 ${large} 1 ${round2(x)} ${round2(y)}`;
}

function round2(x: number): number {
  return Math.round(x * 100) / 100;
}
