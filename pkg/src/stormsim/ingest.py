"""External data feeds: weather forecasts in, reference gauge validation out.

Forecast records land in the datastore as two ordinary series under the
virtual node "ext" (``precip_prob`` and ``precip_mmh``), so subscriptions
consume them exactly like sensor data. The reference gauge is a replayed CSV
of observed flows used to score a simulated outlet hydrograph.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Union

from .datastore import DataStore, Point, SeriesKey

EXT_NODE = "ext"
PROB_SERIES = SeriesKey("precip_prob", EXT_NODE)
INTENSITY_SERIES = SeriesKey("precip_mmh", EXT_NODE)


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class ForecastRecord:
    valid_at_ms: int
    precip_probability: float
    intensity_mmh: float
    horizon_min: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.precip_probability <= 1.0:
            raise IngestError(
                f"probability {self.precip_probability} outside [0, 1]")
        if self.intensity_mmh < 0:
            raise IngestError("intensity must be nonnegative")


@dataclass
class ReferenceGauge:
    station_id: str
    timestamps_ms: list[int] = field(default_factory=list)
    flows_cms: list[float] = field(default_factory=list)

    def __post_init__(self):
        for a, b in zip(self.timestamps_ms, self.timestamps_ms[1:]):
            if b <= a:
                raise IngestError("gauge timestamps must strictly increase")


@dataclass
class IngestResult:
    records: int
    points_written: int
    skipped: int


def _parse_timestamp(text: str) -> int:
    """ISO-8601 UTC to epoch ms. Accepts a trailing Z."""
    raw = text.strip()
    if raw.endswith("Z"):
        raw = raw[:-1] + "+00:00"
    dt = datetime.fromisoformat(raw)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp() * 1000)


def parse_forecast_csv(text: str) -> tuple[list[ForecastRecord], int]:
    """Rows of ``timestamp,probability,intensity_mmh``; malformed rows skipped."""
    records: list[ForecastRecord] = []
    skipped = 0
    reader = csv.reader(io.StringIO(text))
    for row in reader:
        if not row or row[0].strip().lower() == "timestamp":
            continue
        try:
            ts = _parse_timestamp(row[0])
            prob = float(row[1])
            intensity = float(row[2])
            if not (math.isfinite(prob) and math.isfinite(intensity)):
                raise ValueError("non-finite")
            records.append(ForecastRecord(ts, prob, intensity))
        except (ValueError, IndexError, IngestError):
            skipped += 1
    return records, skipped


def ingest_forecast(
    source: Union[str, Path, Iterable[ForecastRecord]], store: DataStore,
) -> IngestResult:
    """Write forecast records into the store; returns counts.

    ``source`` is a CSV path or an iterable of records. Re-ingesting the same
    data is a no-op by last-writer-wins.
    """
    skipped = 0
    if isinstance(source, (str, Path)):
        records, skipped = parse_forecast_csv(
            Path(source).read_text(encoding="utf-8"))
    else:
        records = list(source)
    points: list[Point] = []
    for rec in records:
        points.append(Point(PROB_SERIES, rec.valid_at_ms, rec.precip_probability))
        points.append(Point(INTENSITY_SERIES, rec.valid_at_ms, rec.intensity_mmh))
    result = store.write_points(points)
    return IngestResult(records=len(records), points_written=result.written,
                        skipped=skipped + len(result.rejected))


def load_reference_gauge(path: Union[str, Path],
                         station_id: str = "04174518") -> ReferenceGauge:
    """Read a gauge CSV with header ``timestamp,flow_cms``."""
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["timestamp", "flow_cms"]:
        raise IngestError(f"bad gauge header {header!r}")
    stamps: list[int] = []
    flows: list[float] = []
    for row in reader:
        if not row:
            continue
        stamps.append(_parse_timestamp(row[0]))
        flows.append(float(row[1]))
    return ReferenceGauge(station_id, stamps, flows)


def _interp(x: int, xs: list[int], ys: list[float]) -> float:
    """Piecewise-linear sample of (xs, ys) at x; xs sorted ascending."""
    import bisect

    i = bisect.bisect_left(xs, x)
    if i < len(xs) and xs[i] == x:
        return ys[i]
    if i == 0 or i == len(xs):
        raise IngestError("sample outside simulated range")
    x0, x1 = xs[i - 1], xs[i]
    y0, y1 = ys[i - 1], ys[i]
    return y0 + (x - x0) * (y1 - y0) / (x1 - x0)


def validate_against_reference(
    simulated: list, reference: ReferenceGauge,
    window: tuple[int, int] | None = None,
) -> dict[str, float]:
    """Score a simulated hydrograph against the gauge.

    ``simulated`` is a list of Points or (timestamp_ms, flow) pairs. Metrics
    are evaluated on the reference's own timestamps inside the overlap,
    interpolating the simulated series linearly. Returns
    {rmse, peak_error, volume_error}; the error fractions are signed
    (simulated minus reference, over reference).
    """
    sim_ts: list[int] = []
    sim_q: list[float] = []
    for item in simulated:
        if isinstance(item, Point):
            sim_ts.append(item.timestamp_ms)
            sim_q.append(item.value)
        else:
            ts, q = item
            sim_ts.append(int(ts))
            sim_q.append(float(q))
    if not sim_ts or not reference.timestamps_ms:
        raise IngestError("empty series")

    lo = max(sim_ts[0], reference.timestamps_ms[0])
    hi = min(sim_ts[-1], reference.timestamps_ms[-1])
    if window is not None:
        lo, hi = max(lo, window[0]), min(hi, window[1])
    pairs = [(t, q) for t, q in zip(reference.timestamps_ms,
                                    reference.flows_cms) if lo <= t <= hi]
    if len(pairs) < 2:
        raise IngestError("overlap window is empty")
    ref_ts = [t for t, _ in pairs]
    ref_q = [q for _, q in pairs]
    sim_at_ref = [_interp(t, sim_ts, sim_q) for t in ref_ts]

    n = len(ref_ts)
    rmse = math.sqrt(sum((s - r) ** 2 for s, r in zip(sim_at_ref, ref_q)) / n)

    ref_peak = max(ref_q)
    sim_peak = max(sim_at_ref)
    peak_error = (sim_peak - ref_peak) / ref_peak if ref_peak else 0.0

    def trapz(ys):
        # m^3/s against ms gives a scaled volume; the scale cancels in the ratio
        total = 0.0
        for i in range(1, n):
            total += (ys[i] + ys[i - 1]) / 2 * (ref_ts[i] - ref_ts[i - 1])
        return total

    ref_vol = trapz(ref_q)
    sim_vol = trapz(sim_at_ref)
    volume_error = (sim_vol - ref_vol) / ref_vol if ref_vol else 0.0
    return {"rmse": rmse, "peak_error": peak_error,
            "volume_error": volume_error}
