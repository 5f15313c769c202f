"""Parse span records and service metrics, window time, derive the call graph.

File formats:
  - Span file: JSONL, one object per line with exactly the SpanRecord fields.
  - Metrics file: CSV with the fixed 8-column header (see METRICS_HEADER).

Everything here is a pure function over immutable inputs; no shared state.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

CLIENT = "client"  # sentinel caller name for entry spans

SPAN_FIELDS = (
    "trace_id", "span_id", "parent_service", "service",
    "api", "start_us", "end_us", "status",
)

METRICS_HEADER = (
    "window_index", "service", "pod_count", "cpu_usage_ratio",
    "memory_usage_ratio", "network_rx_bytes", "network_tx_bytes",
    "disk_io_bytes",
)

N_SERVICE_METRICS = 6


class SpanParseError(ValueError):
    def __init__(self, line_no: int, msg: str):
        super().__init__(f"span line {line_no}: {msg}")
        self.line_no = line_no


class MetricsParseError(ValueError):
    def __init__(self, row_no: int, msg: str):
        super().__init__(f"metrics row {row_no}: {msg}")
        self.row_no = row_no


class TraceValidationError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class SpanRecord:
    trace_id: str
    span_id: str
    parent_service: str
    service: str
    api: str
    start_us: int
    end_us: int
    status: str


@dataclass(frozen=True, slots=True)
class Trace:
    trace_id: str
    api: str
    spans: tuple[SpanRecord, ...]

    @property
    def start_us(self) -> int:
        return min(s.start_us for s in self.spans)

    @property
    def end_us(self) -> int:
        return max(s.end_us for s in self.spans)

    @property
    def latency_us(self) -> int:
        return self.end_us - self.start_us

    @property
    def failed(self) -> bool:
        return any(s.status == "failed" for s in self.spans)


@dataclass(frozen=True)
class ServiceMetricRow:
    window_index: int
    service: str
    pod_count: float
    cpu_usage_ratio: float
    memory_usage_ratio: float
    network_rx_bytes: float
    network_tx_bytes: float
    disk_io_bytes: float

    def vector(self) -> np.ndarray:
        return np.array([
            self.pod_count, self.cpu_usage_ratio, self.memory_usage_ratio,
            self.network_rx_bytes, self.network_tx_bytes, self.disk_io_bytes,
        ])


@dataclass(frozen=True)
class Mcg:
    """Directed microservice call graph: lexicographic services, edge set."""
    services: tuple[str, ...]
    edges: frozenset[tuple[str, str]]


@dataclass(frozen=True)
class WindowedTraces:
    api: str
    window_index: int
    traces: tuple[Trace, ...]
    window_length_us: int


def _lines(stream):
    for raw in stream:
        yield raw.decode("utf-8") if isinstance(raw, bytes) else raw


def parse_spans(stream) -> list[SpanRecord]:
    """Parse newline-delimited span records; blank lines are skipped.

    Raises SpanParseError with the 1-based line number on malformed JSON,
    wrong field sets, bad types, end_us < start_us, or a self-invocation
    (parent_service == service, which the call-graph model forbids).
    """
    records = []
    for line_no, line in enumerate(_lines(stream), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise SpanParseError(line_no, f"invalid JSON ({e.msg})") from e
        if not isinstance(obj, dict) or set(obj) != set(SPAN_FIELDS):
            raise SpanParseError(line_no, f"expected exactly fields {SPAN_FIELDS}")
        for f in ("trace_id", "span_id", "parent_service", "service", "api"):
            if not isinstance(obj[f], str) or not obj[f]:
                raise SpanParseError(line_no, f"field '{f}' must be a non-empty string")
        for f in ("start_us", "end_us"):
            if isinstance(obj[f], bool) or not isinstance(obj[f], int):
                raise SpanParseError(line_no, f"field '{f}' must be an integer")
        if obj["status"] not in ("ok", "failed"):
            raise SpanParseError(line_no, "status must be 'ok' or 'failed'")
        if obj["end_us"] < obj["start_us"]:
            raise SpanParseError(line_no, "end_us < start_us")
        if obj["parent_service"] == obj["service"]:
            raise SpanParseError(line_no, "self-invocation: parent_service == service")
        records.append(SpanRecord(**obj))
    return records


def window_of(start_us: int, delta_s: int) -> int:
    """Window index containing a timestamp: floor(start_us / (delta_s * 1e6))."""
    if delta_s <= 0:
        raise ValueError("delta_s must be positive")
    return start_us // (delta_s * 1_000_000)


def group_traces(records: list[SpanRecord], delta_s: int) -> dict[tuple[str, int], WindowedTraces]:
    """Group spans into traces, then traces into (api, window) buckets.

    A trace is assigned to the window of its earliest span start. Ordering
    is first-occurrence throughout, so output is deterministic in input order.
    """
    by_trace: dict[str, list[SpanRecord]] = {}
    for rec in records:
        by_trace.setdefault(rec.trace_id, []).append(rec)

    grouped: dict[tuple[str, int], list[Trace]] = {}
    for trace_id, spans in by_trace.items():
        apis = {s.api for s in spans}
        if len(apis) > 1:
            raise TraceValidationError(
                f"trace {trace_id}: spans disagree on api ({sorted(apis)})")
        span_ids = [s.span_id for s in spans]
        if len(set(span_ids)) != len(span_ids):
            raise TraceValidationError(f"trace {trace_id}: duplicate span_id")
        trace = Trace(trace_id, spans[0].api, tuple(spans))
        key = (trace.api, window_of(trace.start_us, delta_s))
        grouped.setdefault(key, []).append(trace)

    return {
        key: WindowedTraces(key[0], key[1], tuple(traces), delta_s * 1_000_000)
        for key, traces in grouped.items()
    }


def derive_mcg(records: list[SpanRecord]) -> Mcg:
    """Observed services (minus the client sentinel) and caller->callee pairs."""
    services = set()
    edges = set()
    for rec in records:
        services.add(rec.service)
        if rec.parent_service != CLIENT:
            services.add(rec.parent_service)
            if rec.parent_service == rec.service:
                raise TraceValidationError(
                    f"self-invocation edge for service {rec.service}")
            edges.add((rec.parent_service, rec.service))
    return Mcg(tuple(sorted(services)), frozenset(edges))


class ServiceMetrics:
    """Per-(service, window) metric vectors with carry-forward gap filling.

    vector(service, t) returns the row at the most recent window <= t for
    that service, else zeros.
    """

    def __init__(self, rows: list[ServiceMetricRow]):
        per_service: dict[str, dict[int, np.ndarray]] = {}
        for row in rows:
            per_service.setdefault(row.service, {})[row.window_index] = row.vector()
        self._index: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        for service, by_t in per_service.items():
            ts = np.array(sorted(by_t), dtype=np.int64)
            mat = np.stack([by_t[int(t)] for t in ts])
            self._index[service] = (ts, mat)

    def services(self) -> list[str]:
        return sorted(self._index)

    def vector(self, service: str, t: int) -> np.ndarray:
        entry = self._index.get(service)
        if entry is None:
            return np.zeros(N_SERVICE_METRICS)
        ts, mat = entry
        pos = int(np.searchsorted(ts, t, side="right")) - 1
        if pos < 0:
            return np.zeros(N_SERVICE_METRICS)
        return mat[pos].copy()


def load_service_metrics(stream) -> ServiceMetrics:
    """Parse the metrics CSV; duplicate (service, window) rows keep the last."""
    reader = csv.reader(_lines(stream))
    try:
        header = next(reader)
    except StopIteration:
        raise MetricsParseError(0, "empty stream, header row required") from None
    if tuple(h.strip() for h in header) != METRICS_HEADER:
        raise MetricsParseError(1, f"header must be {','.join(METRICS_HEADER)}")

    rows = []
    for row_no, cells in enumerate(reader, start=2):
        if not cells:
            continue
        if len(cells) != len(METRICS_HEADER):
            raise MetricsParseError(row_no, f"expected {len(METRICS_HEADER)} columns")
        try:
            t = int(cells[0])
            values = [float(c) for c in cells[2:]]
        except ValueError:
            raise MetricsParseError(row_no, "non-numeric field") from None
        row = ServiceMetricRow(t, cells[1], *values)
        for name in ("cpu_usage_ratio", "memory_usage_ratio"):
            ratio = getattr(row, name)
            if not 0.0 <= ratio <= 1.0:
                raise MetricsParseError(row_no, f"{name} outside [0, 1]: {ratio}")
        rows.append(row)
    return ServiceMetrics(rows)
