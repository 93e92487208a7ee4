#!/usr/bin/env python3
"""Paired comparison of GPR reprioritization against static priorities.

Each seed draws the same sample set for both arms; only the task order
differs.  Prints the best value found after a fraction of the evaluations
and writes per-run trajectories to ``trajectories.csv``.

    python3 scripts/ackley_comparison.py --out runs/compare --seeds 10
"""

import argparse
import csv
import json
import tempfile
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from osprey.ackley import AckleyParams
from osprey.broker import serve
from osprey.experiment import ExperimentPlan, ThreadLauncher, run_experiment
from osprey.pool import PoolConfig
from osprey.protocol import PollPolicy


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--samples", type=int, default=150)
    ap.add_argument("--retrain-every", type=int, default=20)
    ap.add_argument("--workers", type=int, default=4)
    ap.add_argument("--dim", type=int, default=4)
    ap.add_argument("--at", type=float, default=0.5, help="fraction of evaluations to compare at")
    ap.add_argument("--parallel", type=int, default=None, help="concurrent runs (default: all)")
    args = ap.parse_args()

    poll = PollPolicy(0.1, 0.5)
    params = AckleyParams(dim=args.dim)
    args.out.mkdir(parents=True, exist_ok=True)

    def one(seed, reprio):
        server = serve("127.0.0.1:0", tempfile.mkdtemp(prefix="osprey-cmp-"))
        pool = PoolConfig("p", 0, args.workers, args.workers, 1, poll=poll)
        plan = ExperimentPlan(args.samples, args.retrain_every, [(0, pool)], seed, reprio)
        trace_dir = args.out / f"seed{seed}-{'gpr' if reprio else 'static'}"
        try:
            return run_experiment(plan, params, server.address, ThreadLauncher(trace_dir=trace_dir),
                                  trace_dir=trace_dir, poll=poll)
        finally:
            server.stop()

    keys = [(s, rp) for s in range(args.seeds) for rp in (True, False)]
    with ThreadPoolExecutor(args.parallel or len(keys)) as ex:
        runs = dict(zip(keys, ex.map(lambda k: one(*k), keys)))

    k = max(1, int(args.samples * args.at))
    gpr = np.array([runs[s, True].best_after(k) for s in range(args.seeds)])
    static = np.array([runs[s, False].best_after(k) for s in range(args.seeds)])
    for s in range(args.seeds):
        print(f"seed {s:2d}: gpr {gpr[s]:8.4f}  static {static[s]:8.4f}")
    print(f"mean best after {k}: gpr {gpr.mean():.4f}  static {static.mean():.4f}  "
          f"gpr better in {int(np.sum(gpr < static))}/{args.seeds}")

    with open(args.out / "trajectories.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "arm", "evaluation", "best"])
        for (s, rp), r in sorted(runs.items()):
            for i, b in enumerate(r.best_trajectory, 1):
                w.writerow([s, "gpr" if rp else "static", i, f"{b:.6f}"])
    (args.out / "summary.json").write_text(json.dumps({
        "at": k, "gpr": gpr.tolist(), "static": static.tolist(),
        "gpr_mean": float(gpr.mean()), "static_mean": float(static.mean()),
    }, indent=2))


if __name__ == "__main__":
    main()
