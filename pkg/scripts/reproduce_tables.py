"""Fit every full-scale preset at sigma = 0 and 1e-3 and compare with the reference rows.

    python scripts/reproduce_tables.py [--scale full|desk] [--out runs/tables.json]
"""

import argparse
import json
from dataclasses import asdict
from pathlib import Path

from lagrangia.benchmarks import run_benchmark

PRESETS = [
    "single_case1", "cart_case1", "double_case1", "spherical_case1",
    "single_case2", "cart_case3", "double_case3", "spherical_case3",
]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scale", default="full", choices=["full", "desk"])
    ap.add_argument("--sigmas", type=float, nargs="+", default=[0.0, 1e-3])
    ap.add_argument("--presets", nargs="+", default=PRESETS)
    ap.add_argument("--validate", action="store_true", help="also roll out the learned models")
    ap.add_argument("--out", type=Path, default=Path("runs/tables.json"))
    args = ap.parse_args()

    rows = []
    for sigma in args.sigmas:
        for name in args.presets:
            row = run_benchmark(name, sigma, scale=args.scale, validate_model=args.validate)
            print(row.line(), flush=True)
            rows.append(row)

    print("\n| preset | sigma | verdict | learned | reference | max err |")
    print("|---|---|---|---|---|---|")
    for r in rows:
        err = "" if r.max_rel_err is None else f"{100 * r.max_rel_err:.2f}%"
        ref = "" if r.reference is None else ", ".join(f"{v:g}" for v in r.reference)
        print(f"| {r.preset} | {r.sigma:g} | {r.verdict} | {', '.join(f'{v:.3f}' for v in r.learned)} | {ref} | {err} |")

    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps([asdict(r) for r in rows], indent=2, default=float) + "\n")
    print(f"\nwrote {args.out}")


if __name__ == "__main__":
    main()
