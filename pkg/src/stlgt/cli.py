"""Single entry point: simulate | ingest | build-graph | train | predict | bench | e2e.

Exit codes: 0 success, 1 validation/usage error, 2 acceptance-threshold
failure (e2e only). Every subcommand is pure with respect to its declared
inputs and outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass
from pathlib import Path

from .bench import DEFAULT_N_SWEEP, bench_forward, write_bench_csv
from .config import (ModelConfig, TrainConfig, load_configs, override)
from .model_train import (EvalMetrics, Normalizer, TrainResult, evaluate,
                          load_checkpoint, make_samples, persistence_metrics,
                          predict, save_checkpoint, split_windows, train,
                          write_training_report)
from .numeric_core import NumericalFault
from .span_graph import (SpanGraph, WindowFeatures, assemble_windows,
                         build_span_graph, load_features, load_graph,
                         save_features, save_graph)
from .spatial_encoder import build_operators
from .trace_ingest import (derive_mcg, group_traces, load_service_metrics,
                           parse_spans)
from .workload_sim import (DEFAULT_AMP, DEFAULT_BURSTS, DEFAULT_PERIOD_W,
                           DEFAULT_R0, WorkloadSchedule, default_topology,
                           format_bursts, generate_files, load_topology,
                           parse_bursts, save_topology)


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage by default; we reserve 2 for e2e."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _resolve(path, default_name: str) -> Path:
    p = Path(path)
    return p / default_name if p.is_dir() else p


def _load_grouped(spans_path, metrics_path, delta_s):
    with open(spans_path, encoding="utf-8") as fh:
        records = parse_spans(fh)
    with open(metrics_path, encoding="utf-8") as fh:
        metrics = load_service_metrics(fh)
    return records, derive_mcg(records), group_traces(records, delta_s), metrics


def _api_windows(grouped, api: str):
    windows = sorted((wt for (a, _), wt in grouped.items() if a == api),
                     key=lambda w: w.window_index)
    if not windows:
        apis = sorted({a for a, _ in grouped})
        raise ValueError(f"no traces for api '{api}' (available: {apis})")
    return windows


# --------------------------------------------------------------------------
# subcommands

def cmd_simulate(args) -> int:
    topology = load_topology(args.topology) if args.topology else default_topology()
    schedule = WorkloadSchedule(r0=args.r0, a=args.amp, period_w=args.period,
                                bursts=parse_bursts(args.bursts), seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_traces, n_spans = generate_files(
        topology, schedule, args.windows, args.delta_s,
        out / "spans.jsonl", out / "metrics.csv", seed=args.seed)
    save_topology(topology, out / "topology.json")
    print(json.dumps({"windows": args.windows, "traces": n_traces,
                      "spans": n_spans, "out": str(out)}))
    return 0


def cmd_ingest(args) -> int:
    records, mcg, grouped, metrics = _load_grouped(args.spans, args.metrics,
                                                   args.delta_s)
    per_api: dict[str, int] = {}
    n_traces = 0
    for (api, _), wt in grouped.items():
        per_api[api] = per_api.get(api, 0) + 1
        n_traces += len(wt.traces)
    print(json.dumps({
        "records": len(records),
        "traces": n_traces,
        "api_windows": dict(sorted(per_api.items())),
        "services": list(mcg.services),
        "mcg_edges": len(mcg.edges),
        "metric_services": metrics.services(),
    }, sort_keys=True))
    return 0


def cmd_build_graph(args) -> int:
    _, mcg, grouped, metrics = _load_grouped(args.spans, args.metrics, args.delta_s)
    windows = _api_windows(grouped, args.api)
    n_construct = max(1, int(len(windows) * args.construct_frac))
    graph = build_span_graph(windows[:n_construct], mcg)
    feats = assemble_windows(graph, windows, metrics, args.delta_s,
                             cap=args.cap, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_graph(graph, out / "graph.json")
    save_features(out / "features.json", args.api, args.delta_s, args.cap,
                  args.seed, feats)
    print(json.dumps({"api": args.api, "nodes": graph.n,
                      "forward_edges": len(graph.forward_edges),
                      "windows": len(feats), "out": str(out)}))
    return 0


def train_on_windows(windows: list[WindowFeatures], graph: SpanGraph,
                      mcfg: ModelConfig, tcfg: TrainConfig):
    train_w, val_w, test_w = split_windows(windows, tcfg.train_frac, tcfg.val_frac)
    if not train_w:
        raise ValueError("empty train split; need more windows")
    normalizer = Normalizer.fit(train_w)
    tr = make_samples(train_w, mcfg.L, mcfg.H)
    va = make_samples(val_w, mcfg.L, mcfg.H)
    te = make_samples(test_w, mcfg.L, mcfg.H)
    if len(tr) == 0 or len(va) == 0:
        raise ValueError(f"train/val splits yield {len(tr)}/{len(va)} samples; "
                         f"each needs {mcfg.L + mcfg.H} contiguous windows")
    ops = build_operators(graph)
    result = train(tr, va, mcfg, tcfg, ops, normalizer)
    return result, normalizer, ops, te


def cmd_train(args) -> int:
    graph = load_graph(_resolve(args.graph, "graph.json"))
    _, windows = load_features(_resolve(args.features, "features.json"))
    mcfg, tcfg = load_configs(args.config) if args.config else (ModelConfig(),
                                                                TrainConfig())
    result, normalizer, _, _ = train_on_windows(windows, graph, mcfg, tcfg)
    save_checkpoint(args.out, result.params, mcfg, tcfg, normalizer, graph)
    report_path = args.report or (str(args.out) + ".report.csv")
    write_training_report(report_path, result.report)
    print(json.dumps({"checkpoint": str(args.out), "report": str(report_path),
                      "epochs_run": len(result.report),
                      "best_epoch": result.best_epoch,
                      "best_val_mae_ms": result.best_val_mae_ms}))
    return 0


def cmd_predict(args) -> int:
    params, mcfg, _, normalizer, graph = load_checkpoint(args.ckpt)
    _, windows = load_features(_resolve(args.features, "features.json"))
    by_t = {w.t: w for w in windows}
    wanted = range(args.t - mcfg.L + 1, args.t + 1)
    missing = [t for t in wanted if t not in by_t]
    if missing:
        raise ValueError(f"windows missing for history {list(wanted)}: {missing}")
    ops = build_operators(graph)
    fc = predict(params, mcfg, ops, normalizer, [by_t[t] for t in wanted])
    payload = json.dumps({"origin_t": fc.origin_t, "yhat_ms": list(fc.yhat_ms),
                          "model_version": fc.model_version})
    if args.out:
        Path(args.out).write_text(payload + "\n", encoding="utf-8")
    print(payload)
    return 0


def cmd_bench(args) -> int:
    n_values = tuple(int(v) for v in args.n.split(","))
    variants = ("linear", "dense") if args.variant == "both" else (args.variant,)
    reports = [bench_forward(v, n_values, d=args.d, repeats=args.repeats,
                             warmups=args.warmup, seed=args.seed)
               for v in variants]
    if args.out:
        write_bench_csv(reports, args.out)
    for rep in reports:
        print(json.dumps({
            "variant": rep.variant,
            "n": [r.n for r in rep.rows],
            "median_s": [r.median_s for r in rep.rows],
            "mix_median_s": [r.mix_median_s for r in rep.rows],
            "full_slope": rep.full_slope,
            "mix_slope": rep.mix_slope,
        }))
    return 0


# --------------------------------------------------------------------------
# end-to-end experiment

@dataclass
class E2EResult:
    model: EvalMetrics
    persistence: EvalMetrics
    passed: bool
    train_result: TrainResult
    out_dir: Path


def prepare_desk_data(out_dir: Path, seed: int, windows: int, delta_s: int,
                      cap: int, construct_frac: float):
    """Simulate the default workload and aggregate features against the
    frozen graph; returns (graph, window features)."""
    data_dir = Path(out_dir) / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    topology = default_topology()
    schedule = WorkloadSchedule(seed=seed)
    spans_path = data_dir / "spans.jsonl"
    metrics_path = data_dir / "metrics.csv"
    generate_files(topology, schedule, windows, delta_s, spans_path,
                   metrics_path, seed=seed)
    save_topology(topology, data_dir / "topology.json")
    _, mcg, grouped, metrics = _load_grouped(spans_path, metrics_path, delta_s)
    api_windows = _api_windows(grouped, topology.api)
    n_construct = max(1, int(len(api_windows) * construct_frac))
    graph = build_span_graph(api_windows[:n_construct], mcg)
    feats = assemble_windows(graph, api_windows, metrics, delta_s,
                             cap=cap, seed=seed)
    save_graph(graph, data_dir / "graph.json")
    save_features(data_dir / "features.json", topology.api, delta_s, cap,
                  seed, feats)
    return graph, feats


def run_e2e(out_dir, seed: int = 0, windows: int = 2000, delta_s: int = 30,
            cap: int = 150, rho: float | None = None, decoder: str | None = None,
            config_path=None) -> E2EResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mcfg, tcfg = load_configs(config_path) if config_path else (ModelConfig(),
                                                                TrainConfig())
    mcfg = override(mcfg, rho=rho, decoder=decoder)
    tcfg = override(tcfg, seed=seed)

    graph, feats = prepare_desk_data(out, seed, windows, delta_s, cap,
                                     tcfg.train_frac)
    result, normalizer, ops, test_samples = train_on_windows(feats, graph,
                                                              mcfg, tcfg)
    save_checkpoint(out / "model.ckpt", result.params, mcfg, tcfg, normalizer,
                    graph)
    write_training_report(out / "training_report.csv", result.report)

    model_m = evaluate(result.params, mcfg, ops, normalizer, test_samples, tcfg.q)
    pers_m = persistence_metrics(test_samples, tcfg.q)
    passed = model_m.mean_pinball < pers_m.mean_pinball
    _write_summary(out / "summary.csv", model_m, pers_m)
    return E2EResult(model_m, pers_m, passed, result, out)


def _write_summary(path, model_m: EvalMetrics, pers_m: EvalMetrics) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["horizon", "model_pinball_ms", "model_mae_ms",
                    "persistence_pinball_ms", "persistence_mae_ms"])
        for h in range(len(model_m.pinball_ms)):
            w.writerow([h + 1, repr(float(model_m.pinball_ms[h])),
                        repr(float(model_m.mae_ms[h])),
                        repr(float(pers_m.pinball_ms[h])),
                        repr(float(pers_m.mae_ms[h]))])
        w.writerow(["mean", repr(model_m.mean_pinball), repr(model_m.mean_mae),
                    repr(pers_m.mean_pinball), repr(pers_m.mean_mae)])


def cmd_e2e(args) -> int:
    res = run_e2e(args.out, seed=args.seed, windows=args.windows,
                  delta_s=args.delta_s, cap=args.cap, rho=args.rho,
                  decoder=args.decoder, config_path=args.config)
    print(f"test mean pinball: model={res.model.mean_pinball:.4f} ms, "
          f"persistence={res.persistence.mean_pinball:.4f} ms")
    print(f"test mean MAE:     model={res.model.mean_mae:.4f} ms, "
          f"persistence={res.persistence.mean_mae:.4f} ms")
    print(f"summary: {res.out_dir / 'summary.csv'}")
    if not res.passed:
        print("ACCEPTANCE FAIL: model did not beat the persistence baseline",
              file=sys.stderr)
        return 2
    print("acceptance thresholds met")
    return 0


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stlgt", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate synthetic spans + metrics")
    sim.add_argument("--topology", default=None, help="topology JSON (default: built-in)")
    sim.add_argument("--r0", type=float, default=DEFAULT_R0, help="baseline req/s")
    sim.add_argument("--amp", type=float, default=DEFAULT_AMP, help="cosine amplitude")
    sim.add_argument("--period", type=int, default=DEFAULT_PERIOD_W,
                     help="cosine period in windows")
    sim.add_argument("--bursts", default=format_bursts(DEFAULT_BURSTS),
                     help="start:dur:extra;... ('' for none)")
    sim.add_argument("--windows", type=int, default=2000)
    sim.add_argument("--delta-s", type=int, default=30)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True)
    sim.set_defaults(func=cmd_simulate)

    ing = sub.add_parser("ingest", help="parse + validate spans and metrics")
    ing.add_argument("--spans", required=True)
    ing.add_argument("--metrics", required=True)
    ing.add_argument("--delta-s", type=int, default=30)
    ing.set_defaults(func=cmd_ingest)

    bg = sub.add_parser("build-graph", help="freeze the span graph and aggregate windows")
    bg.add_argument("--spans", required=True)
    bg.add_argument("--metrics", required=True)
    bg.add_argument("--api", required=True)
    bg.add_argument("--delta-s", type=int, default=30)
    bg.add_argument("--cap", type=int, default=150, help="trace subsample cap")
    bg.add_argument("--seed", type=int, default=0)
    bg.add_argument("--construct-frac", type=float, default=0.70,
                    help="leading fraction of windows used to freeze the graph")
    bg.add_argument("--out", required=True)
    bg.set_defaults(func=cmd_build_graph)

    tr = sub.add_parser("train", help="train on aggregated windows")
    tr.add_argument("--features", required=True, help="features.json or its directory")
    tr.add_argument("--graph", required=True, help="graph.json or its directory")
    tr.add_argument("--config", default=None, help="flat key=value config file")
    tr.add_argument("--out", required=True, help="checkpoint path")
    tr.add_argument("--report", default=None, help="training report CSV path")
    tr.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="forecast from a checkpoint")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--features", required=True)
    pr.add_argument("--t", type=int, required=True, help="forecast origin window")
    pr.add_argument("--out", default=None)
    pr.set_defaults(func=cmd_predict)

    be = sub.add_parser("bench", help="linear-vs-dense scaling benchmark")
    be.add_argument("--variant", choices=("linear", "dense", "both"), default="both")
    be.add_argument("--n", default=",".join(str(n) for n in DEFAULT_N_SWEEP))
    be.add_argument("--d", type=int, default=32)
    be.add_argument("--repeats", type=int, default=1000)
    be.add_argument("--warmup", type=int, default=50)
    be.add_argument("--seed", type=int, default=0)
    be.add_argument("--out", default=None, help="report CSV path")
    be.set_defaults(func=cmd_bench)

    e2 = sub.add_parser("e2e", help="simulate, train, and evaluate end to end")
    e2.add_argument("--out", required=True)
    e2.add_argument("--seed", type=int, default=0)
    e2.add_argument("--windows", type=int, default=2000)
    e2.add_argument("--delta-s", type=int, default=30)
    e2.add_argument("--cap", type=int, default=150)
    e2.add_argument("--rho", type=float, default=None,
                    help="override pre-mixing strength (0 disables)")
    e2.add_argument("--decoder", choices=("timesnet", "linear"), default=None)
    e2.add_argument("--config", default=None)
    e2.set_defaults(func=cmd_e2e)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, NumericalFault) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
