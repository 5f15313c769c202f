#!/usr/bin/env python3
"""Seed study: full model vs pre-mixing-off (rho=0) vs linear decoder.

For each seed the synthetic workload is generated once and all three
variants train on identical features, so differences are purely
architectural. Prints one row per (seed, variant) and a win/loss tally.
"""

import argparse
import json
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from stlgt.cli import prepare_desk_data, train_on_windows
from stlgt.config import ModelConfig, TrainConfig, load_configs, override
from stlgt.model_train import evaluate, persistence_metrics

VARIANTS = {
    "full": {},
    "rho0": {"rho": 0.0},
    "lindec": {"decoder": "linear"},
}


def run_seed(out_dir: Path, seed: int, windows: int, mcfg, tcfg):
    graph, feats = prepare_desk_data(out_dir / f"seed{seed}", seed, windows,
                                     delta_s=30, cap=150,
                                     construct_frac=tcfg.train_frac)
    rows = {}
    for name, changes in VARIANTS.items():
        vcfg = override(mcfg, **changes)
        vtcfg = override(tcfg, seed=seed)
        t0 = time.perf_counter()
        result, normalizer, ops, test_samples = train_on_windows(
            feats, graph, vcfg, vtcfg)
        model_m = evaluate(result.params, vcfg, ops, normalizer,
                           test_samples, vtcfg.q)
        pers_m = persistence_metrics(test_samples, vtcfg.q)
        rows[name] = {
            "pinball": model_m.mean_pinball,
            "mae": model_m.mean_mae,
            "persistence_pinball": pers_m.mean_pinball,
            "best_epoch": result.best_epoch,
            "epochs": len(result.report),
            "train_s": time.perf_counter() - t0,
        }
        print(f"seed {seed} {name:7s} pinball {model_m.mean_pinball:8.4f}  "
              f"mae {model_m.mean_mae:8.4f}  pers {pers_m.mean_pinball:8.4f}  "
              f"epochs {len(result.report):3d}  {rows[name]['train_s']:6.1f}s",
              flush=True)
    return rows


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--windows", type=int, default=2000)
    ap.add_argument("--config", default=None)
    ap.add_argument("--out", default="ablation-out")
    args = ap.parse_args(argv)

    mcfg, tcfg = load_configs(args.config) if args.config else (ModelConfig(),
                                                                TrainConfig())
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out)
    all_rows = {}
    for seed in seeds:
        all_rows[seed] = run_seed(out, seed, args.windows, mcfg, tcfg)

    beats_pers = sum(r["full"]["pinball"] < r["full"]["persistence_pinball"]
                     for r in all_rows.values())
    rho0_wins = sum(r["rho0"]["pinball"] >= r["full"]["pinball"]
                    for r in all_rows.values())
    lin_wins = sum(r["lindec"]["pinball"] >= r["full"]["pinball"]
                   for r in all_rows.values())
    n = len(seeds)
    print(f"\nfull model beats persistence:      {beats_pers}/{n}")
    print(f"rho=0 ablation not better than full: {rho0_wins}/{n}")
    print(f"linear decoder not better than full: {lin_wins}/{n}")
    (out / "summary.json").parent.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(all_rows, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
