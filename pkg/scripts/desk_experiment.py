"""Run the desk-scale protocol for several seeds and write a summary table.

    python scripts/desk_experiment.py --seeds 1 2 3 4 5 --out results/desk

Writes ``summary.csv`` (one row per seed) and, per seed, the pool score
table and the loop metrics.  Frame error rate stands in for word error rate.
"""

import argparse
import logging
import pickle
import sys
from pathlib import Path

from nrse import atomic
from nrse.experiment import DeskProtocol, run_seed, summary_rows
from nrse.selection import write_metrics_csv


def _cell(v):
    if v is None:
        return ""
    return f"{v:.6f}" if isinstance(v, float) else v


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="Desk-scale NRSE selection experiment.")
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    ap.add_argument("--out", type=Path, default=Path("results/desk"))
    ap.add_argument("--no-adapt", action="store_true", help="stop after scoring")
    ap.add_argument("--pickle", action="store_true", help="also dump the raw per-seed results")
    args = ap.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")

    results = []
    for seed in args.seeds:
        res = run_seed(seed, DeskProtocol(), adapt=not args.no_adapt)
        results.append(res)
        sdir = args.out / f"seed_{seed}"
        res.pool_scores.write_csv(sdir / "pool_scores.csv")
        if res.loop.passes:
            write_metrics_csv(sdir / "loop_metrics.csv", res.loop.metrics_rows())
        if args.pickle:
            atomic.write_bytes(sdir / "result.pkl", pickle.dumps(res))
        rows = summary_rows(results)
        atomic.write_csv(args.out / "summary.csv", rows[0], [[_cell(v) for v in r] for r in rows[1:]])
        logging.info("seed %d: %s", seed, ", ".join(f"{k}={_cell(v)}" for k, v in zip(rows[0], rows[-1])))
    return 0


if __name__ == "__main__":
    sys.exit(main())
