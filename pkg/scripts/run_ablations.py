"""Guidance and input-mode ablations on the synthetic benchmark, matched seeds.

    python3 scripts/run_ablations.py --data /tmp/sgone-bench --out results/
"""

import argparse
import json
import os

from sgone.experiments import ABLATIONS, BenchmarkConfig, ensure_dataset, format_table, run_ablations


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", default="data/synthetic", help="dataset root (generated if missing)")
    ap.add_argument("--out", help="directory for ablations.json / ablations.txt")
    ap.add_argument("--variants", default=",".join(ABLATIONS))
    ap.add_argument("--folds", default="0,1,2,3")
    args = ap.parse_args()

    bench = BenchmarkConfig(folds=tuple(int(f) for f in args.folds.split(",")))
    index = ensure_dataset(bench.data, args.data)
    rows = run_ablations(index, bench, args.variants.split(","), log=print)
    table = format_table(rows)
    print(table)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "ablations.json"), "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)
        with open(os.path.join(args.out, "ablations.txt"), "w", encoding="utf-8") as fh:
            fh.write(table + "\n")


if __name__ == "__main__":
    main()
