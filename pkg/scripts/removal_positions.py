"""Relative positions of removed blocks across one or more run directories."""
import argparse
import json
from pathlib import Path

from resbuilder.pipeline import HistoryRecord, RunHistory, removal_position_stats


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("runs", nargs="+", help="run directories containing history.csv")
    ap.add_argument("--json", action="store_true", help="print the raw summary per run")
    args = ap.parse_args()

    pooled = []
    for run in args.runs:
        hist = RunHistory.from_csv((Path(run) / "history.csv").read_text())
        stats = removal_position_stats(hist)
        pooled += stats["positions"]
        if args.json:
            print(json.dumps({"run": run, **stats}))
        else:
            q = ", ".join(f"{v:.2f}" for v in stats["quartiles"]) or "-"
            print(f"{run}: {stats['count']} removals, quartiles [{q}]")
    if len(args.runs) > 1:
        stats = removal_position_stats(_pooled(pooled))
        print(f"pooled: {stats['count']} removals, histogram {stats['histogram']}")


def _pooled(positions):
    detail = {"removed": [{"relative_position": p} for p in positions]}
    return RunHistory([HistoryRecord(0, "remove", 0, 0, 0, detail=detail)])


if __name__ == "__main__":
    main()
