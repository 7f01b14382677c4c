"""Structure verdicts across noise levels and seeds.

    python scripts/noise_sweep.py --presets cart_case1 spherical_case3 --sigmas 1e-3 2e-2 6e-2 --seeds 5
"""

import argparse
import csv
from collections import Counter
from pathlib import Path

from lagrangia.benchmarks import run_benchmark
from lagrangia.optimizer import EmptyModelError


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--presets", nargs="+", default=["single_case1", "cart_case1", "double_case1", "spherical_case1"])
    ap.add_argument("--sigmas", type=float, nargs="+", default=[1e-3, 2e-2, 6e-2, 1e-1])
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--scale", default="full", choices=["full", "desk"])
    ap.add_argument("--out", type=Path, default=Path("runs/noise_sweep.csv"))
    args = ap.parse_args()

    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["preset", "sigma", "seed", "verdict", "extra", "missing", "converged", "model"])
        for name in args.presets:
            for sigma in args.sigmas:
                counts = Counter()
                for seed in range(1, args.seeds + 1):
                    try:
                        row = run_benchmark(name, sigma, seed=seed, scale=args.scale)
                        verdict, extra, missing, conv, model = row.verdict, row.extra, row.missing, row.converged, row.rendered
                    except EmptyModelError:
                        verdict, extra, missing, conv, model = "empty model", [], [], False, ""
                    counts[verdict] += 1
                    writer.writerow([name, sigma, seed, verdict, ";".join(extra), ";".join(missing), conv, model])
                    fh.flush()
                summary = ", ".join(f"{k}: {v}" for k, v in sorted(counts.items()))
                print(f"{name:16s} sigma={sigma:<6g} {summary}", flush=True)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
