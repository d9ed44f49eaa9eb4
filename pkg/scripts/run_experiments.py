#!/usr/bin/env python3
"""Train the reproduction protocol, then cross-size evaluation and plots.

Desk scale (default) trains 14 runs: entity/mlp x random/static on 10-node
networks across 3 seeds, plus single-seed entity Random runs at 20 and 40
nodes. --full-matrix instead trains every policy x regime x size x seed cell.
Finished runs found under --out are reused, so the script can resume.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from netdef.config import RunConfig
from netdef.harness import (
    ExperimentMatrix,
    best_checkpoint,
    cross_size_matrix,
    desk_scale_runs,
    emit_plots,
    ensure_runs,
    run_name,
)


def parse_args():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=Path("runs"))
    parser.add_argument("--total-steps", type=int, default=1_000_000)
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--full-matrix", action="store_true")
    parser.add_argument("--eval-episodes", type=int, default=1000)
    parser.add_argument("--skip-xeval", action="store_true")
    parser.add_argument("--skip-plots", action="store_true")
    return parser.parse_args()


def main() -> int:
    args = parse_args()
    seeds = tuple(int(s) for s in args.seeds.split(","))
    if args.full_matrix:
        matrix = ExperimentMatrix(seeds=seeds)
        runs = []
        for cell in matrix.cells():
            policy, regime, nodes, seed = cell
            config = RunConfig.from_dict(
                {
                    "policy": policy,
                    "mode": regime,
                    "nodes": nodes,
                    "seed": seed,
                    "ppo": {"total_steps": args.total_steps},
                }
            )
            runs.append((run_name(*cell), config))
    else:
        runs = desk_scale_runs(args.total_steps, seeds)

    t0 = time.monotonic()
    for i, (name, config) in enumerate(runs):
        print(f"[{i + 1}/{len(runs)}] {name}", flush=True)
        ensure_runs([(name, config)], args.out)
        print(f"  done at {time.monotonic() - t0:.0f}s", flush=True)

    xeval_sizes = tuple(sorted({nodes for _, cfg in runs for nodes in [cfg.nodes]
                                if cfg.policy == "entity" and cfg.mode == "random"}))
    if not args.skip_xeval and len(xeval_sizes) > 1:
        checkpoints = {
            n: best_checkpoint(args.out / run_name("entity", "random", n, seeds[0]))
            for n in xeval_sizes
        }
        print(f"cross-size evaluation over sizes {xeval_sizes}", flush=True)
        cross_size_matrix(
            checkpoints, xeval_sizes, args.eval_episodes, seed=seeds[0],
            out_dir=args.out / "xeval",
        )
        print(f"  done at {time.monotonic() - t0:.0f}s", flush=True)

    if not args.skip_plots:
        written, missing = emit_plots(args.out, args.out / "plots")
        for path in written:
            print(f"wrote {path}", flush=True)
        for item in missing:
            print(f"missing: {item}", flush=True)
    print(f"total {time.monotonic() - t0:.0f}s", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
