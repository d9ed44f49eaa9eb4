"""Command-line interface.

Exit codes: 0 success, 2 invalid arguments/config, 3 numerical fault,
4 unsupported evaluation.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import NumericalFault, UnsupportedEvaluation, __version__
from .config import load_run_config
from .harness import (
    SUMMARY_FIELDS,
    cross_size_matrix,
    emit_plots,
    evaluate,
    run_name,
    write_rewards_csv,
)
from .netgen import connect_components, generate_er_graph, select_entry_nodes
from .ppo import train
from .rng import substream


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="netdef")
    parser.add_argument("--version", action="version", version=f"netdef {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-net", help="generate a connected network topology as JSON")
    p.add_argument("--nodes", type=int, required=True)
    p.add_argument("--edge-prob", type=float, default=0.1)
    p.add_argument("--entry-count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None, help="output path (default: stdout)")

    p = sub.add_parser("train", help="train one policy from a run config")
    p.add_argument("--config", type=Path, required=True, help=".json or .toml run config")
    p.add_argument("--seed", type=int, default=None, help="override the config's seed")
    p.add_argument("--out", type=Path, default=None, help="override the output directory")

    p = sub.add_parser("eval", help="evaluate a checkpoint on fresh random networks")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--nodes", type=int, required=True)
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None, help="per-episode rewards CSV")

    p = sub.add_parser("xeval", help="cross-size evaluation grid for entity checkpoints")
    p.add_argument(
        "--checkpoints", required=True, help="comma-separated paths, one per training size"
    )
    p.add_argument(
        "--sizes", default="10,20,40", help="comma-separated node counts, paired with checkpoints"
    )
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("xeval"))

    p = sub.add_parser("plot", help="render training curves and evaluation box plots")
    p.add_argument("--runs", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    return parser


def _cmd_gen_net(args) -> int:
    rng = substream(args.seed, "topology", 0)
    topo = generate_er_graph(args.nodes, args.edge_prob, rng)
    topo = connect_components(topo, rng)
    topo = select_entry_nodes(topo, args.entry_count, substream(args.seed, "entry", 0))
    doc = json.dumps(topo.to_json_dict(), indent=2) + "\n"
    if args.out is None:
        sys.stdout.write(doc)
    else:
        args.out.write_text(doc)
        print(f"wrote {args.out}")
    return 0


def _cmd_train(args) -> int:
    config = load_run_config(args.config)
    if args.seed is not None:
        config = type(config).from_dict({**config.to_dict(), "seed": args.seed})
    out_dir = args.out or config.out_dir
    if out_dir is None:
        out_dir = Path("runs") / run_name(config.policy, config.mode, config.nodes, config.seed)
    result = train(config, out_dir)
    final = result.rows[-1] if result.rows else {}
    print(
        f"trained {config.policy}/{config.mode}/{config.nodes}n seed {config.seed}: "
        f"{len(result.rows)} eval points, final reward "
        f"{final.get('episodic_reward', float('nan')):.2f} -> {result.out_dir}"
    )
    return 0


def _print_summary(name: str, summary: dict[str, float]) -> None:
    stats = "  ".join(f"{k} {summary[k]:.4f}" for k in SUMMARY_FIELDS)
    print(f"{name}: {stats}")


def _cmd_eval(args) -> int:
    report = evaluate(args.checkpoint, args.nodes, args.episodes, args.seed)
    if args.out is not None:
        write_rewards_csv(args.out, report.rewards)
    _print_summary(f"eval_rand_on_{args.nodes}", report.summary)
    return 0


def _cmd_xeval(args) -> int:
    paths = [Path(p) for p in args.checkpoints.split(",") if p]
    sizes = tuple(int(s) for s in args.sizes.split(",") if s)
    if len(paths) != len(sizes):
        raise ValueError(
            f"{len(paths)} checkpoints but {len(sizes)} sizes; they pair positionally"
        )
    grid = cross_size_matrix(
        dict(zip(sizes, paths)), sizes, args.episodes, args.seed, out_dir=args.out
    )
    for (t, e), report in sorted(grid.items()):
        _print_summary(f"eval_rand_{t}_on_{e}", report.summary)
    print(f"wrote {args.out}/cross_size_summary.csv")
    return 0


def _cmd_plot(args) -> int:
    written, missing = emit_plots(args.runs, args.out)
    for path in written:
        print(f"wrote {path}")
    for item in missing:
        print(f"missing: {item}", file=sys.stderr)
    return 0


_COMMANDS = {
    "gen-net": _cmd_gen_net,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "xeval": _cmd_xeval,
    "plot": _cmd_plot,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalFault as exc:
        print(f"numerical fault: {exc}", file=sys.stderr)
        return 3
    except UnsupportedEvaluation as exc:
        print(f"unsupported evaluation: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
