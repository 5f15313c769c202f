"""Span-graph construction and per-window feature aggregation.

Stage nodes are (parent_service, service) pairs in first-occurrence order
over the provided traces; edges connect v=(p,s) to every v'=(s,u) in both
directions. The graph is built once from a designated construction span of
windows and then frozen: later windows reuse it, and a node that never shows
up in some window simply gets the all-zero span vector there.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .trace_ingest import CLIENT, Mcg, ServiceMetrics, Trace, WindowedTraces

FEATURES_SCHEMA_VERSION = 1
GRAPH_SCHEMA_VERSION = 1

D_SERVICE = 6   # service-level metric features
D_SPAN = 3      # per-stage normalized start/end/duration
D_COMMON = 7    # trace-common vector length
D_IN = D_SERVICE + D_SPAN

COMMON_FIELDS = ("api_throughput", "p50", "p90", "p99", "avg", "median", "failure_ratio")


class GraphBuildError(ValueError):
    pass


class EmptyWindowError(ValueError):
    pass


@dataclass(frozen=True)
class StageNode:
    index: int
    parent: str
    service: str

    @property
    def key(self) -> tuple[str, str]:
        return (self.parent, self.service)

    @property
    def mapped_service(self) -> str:
        return self.service


@dataclass(frozen=True)
class SpanGraph:
    api: str
    nodes: tuple[StageNode, ...]
    forward_edges: tuple[tuple[int, int], ...]

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def edges(self) -> frozenset[tuple[int, int]]:
        """Full directed edge set: forward pairs plus their reverses."""
        return frozenset(self.forward_edges) | frozenset(
            (j, i) for i, j in self.forward_edges)

    def node_index(self) -> dict[tuple[str, str], int]:
        return {node.key: node.index for node in self.nodes}


@dataclass(frozen=True)
class WindowFeatures:
    t: int
    X: np.ndarray          # (N, D_IN)
    c: np.ndarray          # (D_COMMON,)
    y: float               # p95 end-to-end latency, ms
    trace_count: int       # pre-cap trace count


def build_span_graph(windows: list[WindowedTraces], mcg: Mcg) -> SpanGraph:
    """Nodes in first-occurrence order of (parent, service) stage keys,
    bidirectional caller-chain edges, validated against the MCG."""
    if not windows or all(not w.traces for w in windows):
        api = windows[0].api if windows else "?"
        raise GraphBuildError(f"no traces for api {api}")
    api = windows[0].api
    order: dict[tuple[str, str], int] = {}
    for wt in windows:
        if wt.api != api:
            raise GraphBuildError(f"mixed apis: {api} vs {wt.api}")
        for trace in wt.traces:
            for span in trace.spans:
                key = (span.parent_service, span.service)
                if span.parent_service != CLIENT and key not in mcg.edges:
                    raise GraphBuildError(
                        f"span edge {key} not present in the call graph")
                if key not in order:
                    order[key] = len(order)

    nodes = tuple(StageNode(i, p, s) for (p, s), i in order.items())
    forward = []
    for v in nodes:
        for w in nodes:
            if w.parent == v.service:
                forward.append((v.index, w.index))
    return SpanGraph(api, nodes, tuple(forward))


def _latencies_ms(traces) -> np.ndarray:
    return np.array([t.latency_us / 1000.0 for t in traces])


def phi_common(wt: WindowedTraces, delta_s: int) -> np.ndarray:
    """[throughput req/s, p50, p90, p99, avg, median, failure_ratio].

    Latency quantiles use linear interpolation between order statistics.
    """
    if not wt.traces:
        raise EmptyWindowError(f"api {wt.api} window {wt.window_index}: no traces")
    lat = _latencies_ms(wt.traces)
    failed = sum(1 for t in wt.traces if t.failed)
    p50, p90, p99 = np.quantile(lat, [0.50, 0.90, 0.99])
    return np.array([
        len(wt.traces) / delta_s,
        p50, p90, p99,
        lat.mean(),
        float(np.quantile(lat, 0.50)),
        failed / len(wt.traces),
    ])


def phi_span(wt: WindowedTraces, node: StageNode) -> np.ndarray:
    """Average over traces of (min start, max end, summed duration) for spans
    matching the stage key, normalized to each trace's lifetime.

    A zero-duration trace contributes [0, 1, 1] (an instantaneous span fills
    the whole lifetime); a stage unseen in every trace yields [0, 0, 0].
    """
    triples = []
    for trace in wt.traces:
        matching = [s for s in trace.spans
                    if (s.parent_service, s.service) == node.key]
        if not matching:
            continue
        t0, dur = trace.start_us, trace.latency_us
        if dur == 0:
            triples.append((0.0, 1.0, 1.0))
            continue
        starts = [(s.start_us - t0) / dur for s in matching]
        ends = [(s.end_us - t0) / dur for s in matching]
        durs = [(s.end_us - s.start_us) / dur for s in matching]
        triples.append((min(starts), max(ends), sum(durs)))
    if not triples:
        return np.zeros(D_SPAN)
    return np.array(triples).mean(axis=0)


def p95_label(wt: WindowedTraces) -> float:
    """Linear-interpolation 0.95-quantile of end-to-end latencies, ms."""
    if not wt.traces:
        raise EmptyWindowError(f"api {wt.api} window {wt.window_index}: no traces")
    return float(np.quantile(_latencies_ms(wt.traces), 0.95))


def subsample_traces(wt: WindowedTraces, cap: int, seed: int) -> WindowedTraces:
    """Uniform without-replacement subsample to at most cap traces.

    The generator is seeded per (seed, window) so windows are independent
    and the whole pipeline stays reproducible.
    """
    if cap <= 0:
        raise ValueError("cap must be positive")
    if len(wt.traces) <= cap:
        return wt
    rng = np.random.default_rng([seed, wt.window_index])
    keep = np.sort(rng.choice(len(wt.traces), size=cap, replace=False))
    return WindowedTraces(wt.api, wt.window_index,
                          tuple(wt.traces[i] for i in keep), wt.window_length_us)


def assemble_window(graph: SpanGraph, wt: WindowedTraces, metrics: ServiceMetrics,
                    delta_s: int, cap: int = 150, seed: int = 0) -> WindowFeatures:
    """Node-feature matrix [service metrics || span vector], common vector, label."""
    if not wt.traces:
        raise EmptyWindowError(f"api {wt.api} window {wt.window_index}: no traces")
    pre_cap = len(wt.traces)
    capped = subsample_traces(wt, cap, seed)
    x = np.empty((graph.n, D_IN))
    for node in graph.nodes:
        x[node.index, :D_SERVICE] = metrics.vector(node.mapped_service, wt.window_index)
        x[node.index, D_SERVICE:] = phi_span(capped, node)
    return WindowFeatures(
        t=wt.window_index,
        X=x,
        c=phi_common(capped, delta_s),
        y=p95_label(capped),
        trace_count=pre_cap,
    )


def assemble_windows(graph: SpanGraph, windows: list[WindowedTraces],
                     metrics: ServiceMetrics, delta_s: int,
                     cap: int = 150, seed: int = 0) -> list[WindowFeatures]:
    """Aggregate every non-empty window against a frozen graph, sorted by t."""
    out = []
    for wt in sorted(windows, key=lambda w: w.window_index):
        if not wt.traces:
            continue
        out.append(assemble_window(graph, wt, metrics, delta_s, cap, seed))
    return out


# --------------------------------------------------------------------------
# artifacts

def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def graph_to_json(graph: SpanGraph) -> str:
    return _dumps({
        "schema_version": GRAPH_SCHEMA_VERSION,
        "api": graph.api,
        "nodes": [{"index": n.index, "parent": n.parent, "service": n.service}
                  for n in graph.nodes],
        "edges": sorted([i, j] for i, j in graph.forward_edges),
    })


def graph_from_json(text: str) -> SpanGraph:
    obj = json.loads(text)
    if obj.get("schema_version") != GRAPH_SCHEMA_VERSION:
        raise ValueError(f"unsupported graph schema: {obj.get('schema_version')}")
    nodes = tuple(StageNode(n["index"], n["parent"], n["service"])
                  for n in sorted(obj["nodes"], key=lambda n: n["index"]))
    if tuple(n.index for n in nodes) != tuple(range(len(nodes))):
        raise ValueError("graph node indices must be dense from 0")
    return SpanGraph(obj["api"], nodes, tuple((i, j) for i, j in obj["edges"]))


def save_graph(graph: SpanGraph, path) -> None:
    Path(path).write_text(graph_to_json(graph), encoding="utf-8")


def load_graph(path) -> SpanGraph:
    return graph_from_json(Path(path).read_text(encoding="utf-8"))


def features_to_json(api: str, delta_s: int, cap: int, seed: int,
                     windows: list[WindowFeatures]) -> str:
    return _dumps({
        "schema_version": FEATURES_SCHEMA_VERSION,
        "api": api,
        "delta_s": delta_s,
        "cap": cap,
        "seed": seed,
        "windows": [{
            "t": w.t,
            "X": [round_trip_float(v) for v in w.X.reshape(-1)],
            "c": [round_trip_float(v) for v in w.c],
            "y": round_trip_float(w.y),
            "trace_count": w.trace_count,
        } for w in windows],
    })


def round_trip_float(v) -> float:
    # floats serialize via repr, which round-trips exactly in both directions
    return float(v)


def features_from_json(text: str) -> tuple[dict, list[WindowFeatures]]:
    obj = json.loads(text)
    if obj.get("schema_version") != FEATURES_SCHEMA_VERSION:
        raise ValueError(f"unsupported features schema: {obj.get('schema_version')}")
    meta = {k: obj[k] for k in ("api", "delta_s", "cap", "seed")}
    windows = []
    for w in obj["windows"]:
        c = np.array(w["c"])
        x = np.array(w["X"]).reshape(-1, D_IN)
        windows.append(WindowFeatures(int(w["t"]), x, c, float(w["y"]),
                                      int(w["trace_count"])))
    return meta, windows


def save_features(path, api: str, delta_s: int, cap: int, seed: int,
                  windows: list[WindowFeatures]) -> None:
    Path(path).write_text(features_to_json(api, delta_s, cap, seed, windows),
                          encoding="utf-8")


def load_features(path) -> tuple[dict, list[WindowFeatures]]:
    return features_from_json(Path(path).read_text(encoding="utf-8"))
