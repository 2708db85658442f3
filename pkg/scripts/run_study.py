"""Run every shipped study config and print the aggregated tables.

    python scripts/run_study.py                 # all configs
    python scripts/run_study.py --only coverage_bandit --trials 20
"""
import argparse
import json
from pathlib import Path

from bayesdice.experiments import ExperimentConfig, report_summary, run_coverage, run_selection

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--only", nargs="*", help="config stems to run")
    ap.add_argument("--trials", type=int, help="override trial count")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out-dir", default=str(ROOT / "results"))
    args = ap.parse_args()

    for path in sorted((ROOT / "configs").glob("*.json")):
        if args.only and path.stem not in args.only:
            continue
        d = json.loads(path.read_text())
        if args.trials:
            d["trials"] = args.trials
        d["workers"] = args.workers
        cfg = ExperimentConfig.from_dict(d)
        out = Path(args.out_dir) / f"{path.stem}.csv"
        print(f"== {path.stem} ({cfg.trials} trials) -> {out}")
        (run_coverage if cfg.experiment == "coverage" else run_selection)(cfg, out)
        report_summary(out)


if __name__ == "__main__":
    main()
