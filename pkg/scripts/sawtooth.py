#!/usr/bin/env python3
"""Concurrency over time for three pool configurations draining the same queue.

Writes one pool trace per configuration plus ``series.csv`` (time-averaged
running tasks per bucket) and prints the steady-state statistics.

    python3 scripts/sawtooth.py --out runs/sawtooth
"""

import argparse
import csv
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from osprey.ackley import AckleyParams, LognormalDelay
from osprey.dynamics import run_fixed_queue, sawtooth_stats
from osprey.protocol import PollPolicy
from osprey.trace import concurrency_series


def parse_config(text):
    batch, threshold = (int(v) for v in text.split("/"))
    return batch, threshold


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--tasks", type=int, default=200)
    ap.add_argument("--workers", type=int, default=8)
    ap.add_argument("--configs", nargs="+", type=parse_config, default=[(12, 1), (8, 1), (8, 4)],
                    metavar="BATCH/THRESHOLD")
    ap.add_argument("--median", type=float, default=0.5, help="median task runtime (s)")
    ap.add_argument("--bucket", type=float, default=0.05, help="series bucket (s)")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    params = AckleyParams(delay=LognormalDelay(math.log(args.median), 0.5))
    poll = PollPolicy(0.05, 0.5)

    def one(cfg):
        batch, thr = cfg
        return run_fixed_queue(args.tasks, args.workers, batch, thr, params, poll, args.seed,
                               args.out / f"b{batch}-t{thr}")

    # the runs are sleep-bound, so they can share the machine
    with ThreadPoolExecutor(len(args.configs)) as ex:
        traces = list(ex.map(one, args.configs))

    args.out.mkdir(parents=True, exist_ok=True)
    columns = {}
    for (batch, thr), events in zip(args.configs, traces):
        s = sawtooth_stats(events, args.workers, thr, args.bucket)
        print(f"batch {batch:3d} threshold {thr:2d}: full {s.full_fraction:.2f}  below {s.below_fraction:.2f}  "
              f"min {s.min_value:.2f}  dips<={s.dip_level}: {s.dips}")
        series = concurrency_series(events, args.bucket)
        columns[f"b{batch}_t{thr}"] = series.total
    n = max(len(v) for v in columns.values())
    with open(args.out / "series.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", *columns])
        for i in range(n):
            w.writerow([f"{i * args.bucket:.3f}", *(f"{v[i]:.3f}" if i < len(v) else "" for v in columns.values())])
    print(f"wrote {args.out / 'series.csv'}")


if __name__ == "__main__":
    main()
