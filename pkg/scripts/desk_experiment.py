"""Run the desk-scale comparison: baseline, one comparator per regularizer, fusion.

    python scripts/desk_experiment.py --out-dir runs/desk
    python scripts/desk_experiment.py --out-dir runs/warm init_from_baseline=true detect_lr_scale=0.01

Trailing ``key=value`` pairs override TrainConfig fields. Writes
metrics.csv, roc.csv, protocol.txt, per-regularizer training logs and
results.json, and prints the acceptance checks.
"""

import argparse
import json
import logging
from pathlib import Path

from dcn.config import from_strings, to_strings
from dcn.experiment import ExperimentConfig, accepts, run_experiment
from dcn.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", default="runs/desk")
    ap.add_argument("--regularizers", default="diversity,keypoints")
    ap.add_argument("overrides", nargs="*", metavar="key=value")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")

    values = to_strings(TrainConfig())
    for item in args.overrides:
        key, _, value = item.partition("=")
        if key not in values:
            ap.error(f"unknown TrainConfig field {key!r}")
        values[key] = value
    regs = tuple(r for r in args.regularizers.split(",") if r)
    cfg = ExperimentConfig(train=from_strings(TrainConfig, values), regularizers=regs)

    out = Path(args.out_dir)
    results = run_experiment(cfg, out)
    checks = accepts(results, regs)
    payload = {"train": to_strings(cfg.train), "results": results, "checks": checks}
    (out / "results.json").write_text(json.dumps(payload, indent=2, default=str))

    for name, row in results.items():
        if isinstance(row, dict) and "auc" in row:
            print(f"{name:18s} " + "  ".join(f"{k} {v:.3f}" for k, v in row.items()))
    print(f"runtime {results['runtime_s'] / 60:.1f} min")
    for name, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return 0 if all(checks.values()) else 1


if __name__ == "__main__":
    raise SystemExit(main())
