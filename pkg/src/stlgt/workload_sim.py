"""Synthetic span and metric generation from a stage tree and a rate schedule.

The request rate is r(t) = r0 + a*cos(2*pi*t/P) + bursts(t), clamped at 0,
with rectangular burst segments (abrupt rise and drop). Per window the trace
count is Poisson(r(t) * delta); each trace walks the stage tree, a stage doing
its own sampled work and then dispatching all children in parallel, so the
end-to-end latency is the critical-path sum of stage work. Under load the
critical path can migrate between branches (a flat branch dominates at low
rate, a load-sensitive one at high rate), which makes the p95 response convex
in rate rather than affine. Service metrics are synthesized with cpu tracking
the normalized rate plus per-(service, window) noise. Everything is
deterministic given the seed.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .trace_ingest import CLIENT, METRICS_HEADER

DEFAULT_R0 = 4.0
DEFAULT_AMP = 1.5
DEFAULT_PERIOD_W = 16


def _burst_comb(n_bursts: int = 140, extra: float = 5.0):
    # aperiodic onsets (spacing cycle co-prime to the cosine period) and a
    # half/half mix of short and long rects; the mix is the point: a couple
    # of windows into a burst its remaining length is genuinely ambiguous,
    # so the forecast-given-elapsed-time curve is not linear in the history
    out, t = [], 40
    spacings = (13, 21, 17, 24)
    durations = (2, 7, 7, 2, 2, 7)
    for i in range(n_bursts):
        dur = durations[i % len(durations)]
        out.append((t, dur, extra))
        t += dur + spacings[i % len(spacings)]
    return tuple(out)


DEFAULT_BURSTS = _burst_comb()
DEFAULT_NOISE_SIGMA = 0.25
DEFAULT_FAILURE_RATE = 0.01
DEFAULT_WINDOW_SHOCK = 0.25


@dataclass(frozen=True)
class WorkloadSchedule:
    r0: float = DEFAULT_R0
    a: float = DEFAULT_AMP
    period_w: int = DEFAULT_PERIOD_W
    bursts: tuple[tuple[int, int, float], ...] = DEFAULT_BURSTS
    seed: int = 0


@dataclass(frozen=True)
class StageSpec:
    parent_service: str
    service: str
    base_latency_ms: float
    load_sensitivity: float


@dataclass(frozen=True)
class SyntheticTopology:
    api: str
    stages: tuple[StageSpec, ...]

    def __post_init__(self):
        roots = [s for s in self.stages if s.parent_service == CLIENT]
        if len(roots) != 1:
            raise ValueError(f"topology needs exactly one client-called root, got {len(roots)}")
        callees = [s.service for s in self.stages]
        if len(set(callees)) != len(callees):
            raise ValueError("each service may appear once as a callee")
        known = set(callees)
        for s in self.stages:
            if s.parent_service != CLIENT and s.parent_service not in known:
                raise ValueError(f"stage {s.service}: unknown parent {s.parent_service}")
            if s.parent_service == s.service:
                raise ValueError(f"stage {s.service}: self-invocation")
        # reachability from the root guarantees the parent links form a tree
        children = self.children()
        seen, frontier = set(), [roots[0].service]
        while frontier:
            svc = frontier.pop()
            if svc in seen:
                raise ValueError("topology contains a cycle")
            seen.add(svc)
            frontier.extend(c.service for c in children.get(svc, ()))
        if seen != known:
            raise ValueError(f"unreachable services: {sorted(known - seen)}")

    def children(self) -> dict[str, tuple[StageSpec, ...]]:
        out: dict[str, list[StageSpec]] = {}
        for s in self.stages:
            out.setdefault(s.parent_service, []).append(s)
        return {k: tuple(v) for k, v in out.items()}

    def root(self) -> StageSpec:
        return next(s for s in self.stages if s.parent_service == CLIENT)


def default_topology() -> SyntheticTopology:
    """Checkout fan-out whose critical path migrates with load: auth is slow
    but flat, the catalog->db chain is fast at idle yet load-sensitive, and
    the two cross near the middle of the default rate swing."""
    return SyntheticTopology("checkout", (
        StageSpec(CLIENT, "frontend", 6.0, 0.20),
        StageSpec("frontend", "auth", 20.0, 0.05),
        StageSpec("frontend", "catalog", 5.0, 1.40),
        StageSpec("catalog", "cache", 1.5, 1.00),
        StageSpec("catalog", "db", 4.0, 1.80),
        StageSpec("frontend", "ship", 7.0, 0.50),
    ))


def rate_at(schedule: WorkloadSchedule, t: int) -> float:
    """Baseline + cosine + rectangular bursts, clamped at zero."""
    rate = schedule.r0 + schedule.a * math.cos(2.0 * math.pi * t / schedule.period_w)
    for start, dur, extra in schedule.bursts:
        if start <= t < start + dur:
            rate += extra
    return max(rate, 0.0)


def _generate(topology: SyntheticTopology, schedule: WorkloadSchedule,
              n_windows: int, delta_s: int, seed, span_write, metric_write,
              noise_sigma: float, failure_rate: float,
              window_shock_sigma: float) -> tuple[int, int]:
    rng = np.random.default_rng(schedule.seed if seed is None else seed)
    children = topology.children()
    root = topology.root()
    services = sorted(s.service for s in topology.stages)
    sens = {s.service: s.load_sensitivity for s in topology.stages}
    window_us = delta_s * 1_000_000
    r0 = max(schedule.r0, 1e-9)

    metric_write(",".join(METRICS_HEADER) + "\n")
    n_traces = n_spans = 0
    for t in range(n_windows):
        rate = rate_at(schedule, t)
        load = rate / r0
        count = int(rng.poisson(rate * delta_s))
        offsets = np.sort(rng.integers(0, window_us, size=count))
        # one shared work multiplier per window: contention jitter that no
        # feature explains, so the label's conditional quantile keeps an
        # irreducible spread that forecasts cannot collapse
        shock = (math.exp(rng.normal(0.0, window_shock_sigma))
                 if window_shock_sigma > 0 else 1.0)
        for i in range(count):
            trace_id = f"tr-{t}-{i}"
            spans: list[dict] = []
            serial = 0

            def place(stage: StageSpec, start: int) -> int:
                nonlocal serial, n_spans
                noise = math.exp(rng.normal(0.0, noise_sigma)) if noise_sigma > 0 else 1.0
                work = int(round(stage.base_latency_ms * 1000.0
                                 * (1.0 + stage.load_sensitivity * load) * noise))
                record = {
                    "trace_id": trace_id,
                    "span_id": f"s{serial}",
                    "parent_service": stage.parent_service,
                    "service": stage.service,
                    "api": topology.api,
                    "start_us": start,
                    "end_us": start,  # patched after children return
                    "status": "ok",
                }
                serial += 1
                n_spans += 1
                spans.append(record)
                # own work first, then all children dispatched in parallel;
                # the stage returns when its slowest child does
                dispatch = start + work
                end = dispatch
                for child in children.get(stage.service, ()):
                    end = max(end, place(child, dispatch))
                record["end_us"] = end
                return end

            place(root, int(t * window_us + offsets[i]))
            if rng.random() < failure_rate:
                spans[int(rng.integers(0, len(spans)))]["status"] = "failed"
            for record in spans:
                span_write(json.dumps(record, separators=(",", ":")) + "\n")
            n_traces += 1

        # observation noise is deliberately coarse: per-service gauges are
        # noisy probes of one shared load, so averaging over graph
        # neighborhoods genuinely denoises
        for svc in services:
            cpu = float(np.clip(0.10 + 0.30 * sens[svc] * load
                                + rng.normal(0.0, 0.045), 0.0, 1.0))
            mem = float(np.clip(0.35 + 0.18 * load + rng.normal(0.0, 0.04), 0.0, 1.0))
            pods = max(1, int(round(0.75 + 0.5 * load)))
            rx = max(0.0, count * 1200.0 * (1.0 + rng.normal(0.0, 0.10)))
            tx = max(0.0, count * 800.0 * (1.0 + rng.normal(0.0, 0.10)))
            disk = max(0.0, count * 300.0 * (1.0 + rng.normal(0.0, 0.15)))
            metric_write(f"{t},{svc},{pods},{cpu!r},{mem!r},{rx!r},{tx!r},{disk!r}\n")
    return n_traces, n_spans


def generate(topology: SyntheticTopology, schedule: WorkloadSchedule,
             n_windows: int, delta_s: int, seed=None,
             noise_sigma: float = DEFAULT_NOISE_SIGMA,
             failure_rate: float = DEFAULT_FAILURE_RATE) -> tuple[str, str]:
    """In-memory generation; returns (span JSONL text, metrics CSV text)."""
    spans_buf, metrics_buf = io.StringIO(), io.StringIO()
    _generate(topology, schedule, n_windows, delta_s, seed,
              spans_buf.write, metrics_buf.write, noise_sigma, failure_rate)
    return spans_buf.getvalue(), metrics_buf.getvalue()


def generate_files(topology: SyntheticTopology, schedule: WorkloadSchedule,
                   n_windows: int, delta_s: int, spans_path, metrics_path,
                   seed=None, noise_sigma: float = DEFAULT_NOISE_SIGMA,
                   failure_rate: float = DEFAULT_FAILURE_RATE) -> tuple[int, int]:
    """Streaming generation for multi-hundred-MB span files."""
    with open(spans_path, "w", encoding="utf-8") as sf, \
            open(metrics_path, "w", encoding="utf-8", newline="") as mf:
        return _generate(topology, schedule, n_windows, delta_s, seed,
                         sf.write, mf.write, noise_sigma, failure_rate)


# --------------------------------------------------------------------------
# topology files and burst specs

def topology_to_json(topology: SyntheticTopology) -> str:
    return json.dumps({
        "api": topology.api,
        "stages": [{
            "parent_service": s.parent_service,
            "service": s.service,
            "base_latency_ms": s.base_latency_ms,
            "load_sensitivity": s.load_sensitivity,
        } for s in topology.stages],
    }, sort_keys=True, separators=(",", ":")) + "\n"


def topology_from_json(text: str) -> SyntheticTopology:
    obj = json.loads(text)
    stages = tuple(StageSpec(s["parent_service"], s["service"],
                             float(s["base_latency_ms"]), float(s["load_sensitivity"]))
                   for s in obj["stages"])
    return SyntheticTopology(obj["api"], stages)


def save_topology(topology: SyntheticTopology, path) -> None:
    Path(path).write_text(topology_to_json(topology), encoding="utf-8")


def load_topology(path) -> SyntheticTopology:
    return topology_from_json(Path(path).read_text(encoding="utf-8"))


def parse_bursts(spec: str) -> tuple[tuple[int, int, float], ...]:
    """'start:dur:extra;start:dur:extra;...' -> burst tuples ('' means none)."""
    spec = spec.strip()
    if not spec:
        return ()
    out = []
    for part in spec.split(";"):
        fields = part.split(":")
        if len(fields) != 3:
            raise ValueError(f"burst segment '{part}' must be start:dur:extra")
        out.append((int(fields[0]), int(fields[1]), float(fields[2])))
    return tuple(out)


def format_bursts(bursts) -> str:
    return ";".join(f"{s}:{d}:{e}" for s, d, e in bursts)
