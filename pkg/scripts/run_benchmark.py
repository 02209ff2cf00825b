"""Train and evaluate every fold of the synthetic benchmark.

    python3 scripts/run_benchmark.py --data /tmp/sgone-bench --out results/
"""

import argparse
import json
import os

from sgone.experiments import BenchmarkConfig, ensure_dataset, mean_miou, run_benchmark


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", default="data/synthetic", help="dataset root (generated if missing)")
    ap.add_argument("--out", help="directory for summary.json")
    ap.add_argument("--folds", default="0,1,2,3")
    ap.add_argument("--episodes", type=int, default=100, help="test episodes per held-out category")
    args = ap.parse_args()

    bench = BenchmarkConfig(folds=tuple(int(f) for f in args.folds.split(",")), eval_episodes=args.episodes)
    index = ensure_dataset(bench.data, args.data)
    results = run_benchmark(index, bench, kshot=True, log=print)
    summary = {
        "one_shot": mean_miou(results),
        "all_foreground": mean_miou(results, "baseline"),
        "max_fusion": mean_miou(results, "max_fusion"),
        "avg_vector": mean_miou(results, "avg_vector"),
        "per_fold": {r.fold: {"one_shot": r.one_shot.miou, "all_foreground": r.baseline.miou,
                              "per_category": r.one_shot.per_category_iou,
                              "train_seconds": round(r.train_seconds, 1)} for r in results},
    }
    print(f"mean one-shot mIoU {summary['one_shot']:.4f} (all-foreground {summary['all_foreground']:.4f})")
    print(f"{bench.shots}-shot: max fusion {summary['max_fusion']:.4f}, averaged vector {summary['avg_vector']:.4f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "summary.json"), "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2)


if __name__ == "__main__":
    main()
