"""Race APStar, random sampling and MWU on random star-set families.

Prints per intersection-ratio bin medians and writes the raw rows to CSV.

    python3 scripts/starset_benchmark.py --families 300 --out runs/starsets
"""
import argparse
import csv
import json
from pathlib import Path

from mmpf.starsets import run_benchmark, summarize


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--families", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iters", type=int, default=10_000)
    p.add_argument("--out", default="runs/starsets")
    args = p.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_benchmark(args.families, args.seed, max_iters=args.max_iters)
    with open(out / "benchmark.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["seed", "ratio", "strategy", "iterations", "timeout_flag"])
        w.writeheader()
        w.writerows(rows)
    summary = summarize(rows)
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(f"{'ratio bin':>16} {'n':>4} {'apstar':>8} {'random':>8} {'mwu':>8}  timeouts(apstar)")
    for b in summary["bins"]:
        m = b["median"]
        cells = " ".join(f"{m[s]:8.1f}" if m[s] is not None else f"{'-':>8}" for s in ("apstar", "random", "mwu"))
        print(f"[{b['lo']:.3f}, {b['hi']:.3f}) {b['n_families']:4d} {cells}  {b['timeouts']['apstar']}")


if __name__ == "__main__":
    main()
