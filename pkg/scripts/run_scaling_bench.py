#!/usr/bin/env python3
"""Scaling study: wall-clock and MAC growth of linear vs dense global mixing.

Times the batch-1 forward and the bare mixing stage across growing random
span graphs, prints fitted log-log slopes, and writes the per-size rows to
CSV. Near-linear slopes for the streaming mix and near-quadratic slopes for
the dense ablation are the expected picture.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from stlgt.bench import bench_forward, write_bench_csv


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", default="32,64,128,256,512,1024",
                    help="comma-separated graph sizes")
    ap.add_argument("--d", type=int, default=32)
    ap.add_argument("--repeats", type=int, default=1000)
    ap.add_argument("--warmup", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/bench.csv")
    args = ap.parse_args()

    n_values = tuple(int(v) for v in args.n.split(","))
    reports = []
    for variant in ("linear", "dense"):
        rep = bench_forward(variant, n_values, d=args.d, repeats=args.repeats,
                            warmups=args.warmup, seed=args.seed)
        reports.append(rep)
        print(f"{variant:6s}  mix slope {rep.mix_slope:.3f}  "
              f"full slope {rep.full_slope:.3f}")
        for row in rep.rows:
            print(f"  n={row.n:5d}  mix {row.mix_median_s * 1e6:9.1f} us  "
                  f"full {row.median_s * 1e3:8.2f} ms  macs {row.mix_macs}")

    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_bench_csv(reports, args.out)
    print(f"rows written to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
