"""Experiment harness: training matrices, zero-shot evaluation, statistics, plots."""

from __future__ import annotations

import csv
import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import UnsupportedEvaluation
from .config import RunConfig
from .env import EnvRegime, NetworkEnv, compose_entity_action
from .game import GameConfig
from .policy import load_policy
from .ppo import DEFAULT_LEARNING_RATES, train
from .rng import derive_seed, np_stream

POLICY_FAMILIES = ("entity", "mlp")
REGIMES = ("random", "static")
SUMMARY_FIELDS = ("mean", "std", "min", "25%", "50%", "75%", "max")

_RUN_DIR_RE = re.compile(r"^(entity|mlp)_(random|static)_(\d+)_seed(\d+)$")


@dataclass(frozen=True)
class ExperimentMatrix:
    """Training grid: every policy × regime × size × seed cell is one run."""

    policies: tuple[str, ...] = ("entity", "mlp")
    regimes: tuple[str, ...] = ("random", "static")
    sizes: tuple[int, ...] = (10, 20, 40)
    seeds: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self) -> None:
        if not self.policies or not self.regimes or not self.sizes or not self.seeds:
            raise ValueError("every matrix dimension must be nonempty")
        for p in self.policies:
            if p not in POLICY_FAMILIES:
                raise ValueError(f"unknown policy family {p!r}")
        for r in self.regimes:
            if r not in REGIMES:
                raise ValueError(f"unknown regime {r!r}")
        for n in self.sizes:
            if n < 1:
                raise ValueError("sizes must be positive")

    def cells(self):
        for policy in self.policies:
            for regime in self.regimes:
                for nodes in self.sizes:
                    for seed in self.seeds:
                        yield policy, regime, nodes, seed

    def __len__(self) -> int:
        return len(self.policies) * len(self.regimes) * len(self.sizes) * len(self.seeds)


def run_name(policy: str, regime: str, nodes: int, seed: int) -> str:
    return f"{policy}_{regime}_{nodes}_seed{seed}"


def summarize(rewards) -> dict[str, float]:
    """Mean, sample std (n-1), min, linear-interpolation quartiles, max."""
    x = np.asarray(rewards, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("cannot summarize an empty reward vector")
    std = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
    q25, q50, q75 = (float(q) for q in np.percentile(x, [25, 50, 75]))
    return {
        "mean": float(np.mean(x)),
        "std": std,
        "min": float(np.min(x)),
        "25%": q25,
        "50%": q50,
        "75%": q75,
        "max": float(np.max(x)),
    }


@dataclass
class EvalReport:
    rewards: np.ndarray
    summary: dict[str, float]

    @classmethod
    def from_rewards(cls, rewards) -> "EvalReport":
        arr = np.asarray(rewards, dtype=np.float64).reshape(-1)
        return cls(arr, summarize(arr))


def _resolve_policy(policy):
    if isinstance(policy, (str, Path)):
        return load_policy(policy)
    return policy


def evaluate(
    policy,
    node_count: int,
    episodes: int,
    seed: int,
    game: GameConfig | None = None,
    batch_size: int = 64,
) -> EvalReport:
    """Sampled rollouts on fresh random networks, one per episode.

    Episode i's network and action draws come from substreams keyed by i, so
    the report is independent of batch_size and repeatable for a given seed.
    """
    policy = _resolve_policy(policy)
    game = game if game is not None else GameConfig()
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if not policy.supports_node_count(node_count):
        raise UnsupportedEvaluation(
            f"{policy.family} policy does not support {node_count}-node networks"
        )
    rewards = np.zeros(episodes)
    for start in range(0, episodes, batch_size):
        indices = range(start, min(start + batch_size, episodes))
        envs = [
            NetworkEnv(EnvRegime("random", node_count, derive_seed(seed, "episode", i)), game)
            for i in indices
        ]
        rngs = [np_stream(seed, "actions", i) for i in indices]
        obs = [env.reset() for env in envs]
        totals = np.zeros(len(envs))
        for _ in range(game.episode_length):
            actions, _, _ = policy.sample_batch(obs, rngs)
            obs = []
            for j, env in enumerate(envs):
                blue = compose_entity_action(
                    actions[j].type_index, actions[j].node_index, env.node_count
                )
                ob = env.step(blue)
                totals[j] += ob.reward
                obs.append(ob)
        rewards[list(indices)] = totals
    return EvalReport.from_rewards(rewards)


# --- training matrix ----------------------------------------------------------------


def _cell_config(base: RunConfig, policy: str, regime: str, nodes: int, seed: int) -> RunConfig:
    doc = base.to_dict()
    doc.update(policy=policy, mode=regime, nodes=nodes, seed=seed)
    # A family-default learning rate tracks the cell's family; an explicit
    # override in the base config applies to every cell.
    if doc["ppo"]["learning_rate"] == DEFAULT_LEARNING_RATES[base.policy]:
        del doc["ppo"]["learning_rate"]
    doc.pop("out_dir", None)
    return RunConfig.from_dict(doc)


def run_matrix(
    matrix: ExperimentMatrix,
    base_config: RunConfig,
    out_root: str | Path,
    parallelism: int = 1,
) -> dict[str, dict]:
    """One training run per matrix cell; failures are recorded, the matrix continues."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    jobs = [
        (run_name(*cell), _cell_config(base_config, *cell)) for cell in matrix.cells()
    ]

    def _run(job):
        name, config = job
        run_dir = out_root / name
        try:
            result = train(config, run_dir)
            return name, {
                "status": "ok",
                "dir": str(run_dir),
                "final_checkpoint": str(result.final_checkpoint),
                "log_rows": len(result.rows),
            }
        except Exception as exc:  # keep the rest of the matrix alive
            return name, {
                "status": "failed",
                "dir": str(run_dir),
                "error": f"{type(exc).__name__}: {exc}",
            }

    if parallelism <= 1:
        results = dict(_run(job) for job in jobs)
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = dict(pool.map(_run, jobs))
    (out_root / "matrix.json").write_text(json.dumps(results, indent=2) + "\n")
    return results


# --- cross-size evaluation -------------------------------------------------------------


def write_rewards_csv(path: str | Path, rewards) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "reward"])
        for i, r in enumerate(np.asarray(rewards, dtype=np.float64)):
            writer.writerow([i, repr(float(r))])


def read_rewards_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(row["reward"]) for row in rows])


def cross_size_matrix(
    checkpoints: dict[int, object],
    eval_sizes: tuple[int, ...],
    episodes: int,
    seed: int,
    out_dir: str | Path | None = None,
    game: GameConfig | None = None,
) -> dict[tuple[int, int], EvalReport]:
    """Grid of EvalReports: rows = training size, cols = eval size.

    Only entity checkpoints generalise across sizes, so other families are refused.
    """
    policies = {size: _resolve_policy(p) for size, p in checkpoints.items()}
    for size, policy in policies.items():
        if policy.family != "entity":
            raise UnsupportedEvaluation(
                f"cross-size evaluation requires entity checkpoints, got {policy.family!r} for {size}"
            )
    grid: dict[tuple[int, int], EvalReport] = {}
    for train_size in sorted(policies):
        for eval_size in eval_sizes:
            grid[(train_size, eval_size)] = evaluate(
                policies[train_size],
                eval_size,
                episodes,
                derive_seed(seed, "xeval", train_size, eval_size),
                game=game,
            )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "cross_size_summary.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["name", "episodes"] + list(SUMMARY_FIELDS))
            for (t, e), report in sorted(grid.items()):
                writer.writerow(
                    [f"eval_rand_{t}_on_{e}", len(report.rewards)]
                    + [repr(report.summary[k]) for k in SUMMARY_FIELDS]
                )
        for (t, e), report in grid.items():
            write_rewards_csv(out_dir / f"eval_rand_{t}_on_{e}.csv", report.rewards)
    return grid


def uniform_random_baseline(
    node_count: int, episodes: int, seed: int, game: GameConfig | None = None
) -> EvalReport:
    """Monte-Carlo reward of uniformly random composite actions on fresh networks."""
    game = game if game is not None else GameConfig()
    rewards = np.zeros(episodes)
    for i in range(episodes):
        env = NetworkEnv(
            EnvRegime("random", node_count, derive_seed(seed, "episode", i)), game
        )
        rng = np_stream(seed, "actions", i)
        env.reset()
        total = 0.0
        for _ in range(game.episode_length):
            blue = compose_entity_action(
                int(rng.integers(2)), int(rng.integers(node_count)), node_count
            )
            total += env.step(blue).reward
        rewards[i] = total
    return EvalReport.from_rewards(rewards)


# --- reproduction protocol --------------------------------------------------------------


def desk_scale_runs(
    total_steps: int = 1_000_000, seeds: tuple[int, ...] = (0, 1, 2)
) -> list[tuple[str, RunConfig]]:
    """Scaled reproduction protocol: every policy×regime pair on 10-node networks
    across seeds, plus single-seed entity Random runs at 20 and 40 nodes for
    zero-shot cross-size evaluation."""
    cells = [
        (policy, regime, 10, seed)
        for policy in POLICY_FAMILIES
        for regime in REGIMES
        for seed in seeds
    ]
    cells += [("entity", "random", nodes, seeds[0]) for nodes in (20, 40)]
    runs = []
    for policy, regime, nodes, seed in cells:
        config = RunConfig.from_dict(
            {
                "policy": policy,
                "mode": regime,
                "nodes": nodes,
                "seed": seed,
                "ppo": {"total_steps": total_steps},
            }
        )
        runs.append((run_name(policy, regime, nodes, seed), config))
    return runs


def final_eval_mean(log_path: str | Path, points: int = 20) -> float:
    """Mean episodic reward over the last `points` evaluation rows of a log."""
    _, rewards = _read_log_curve(Path(log_path))
    if len(rewards) < points:
        raise ValueError(f"{log_path} has {len(rewards)} rows, need {points}")
    return float(rewards[-points:].mean())


def best_checkpoint(run_dir: str | Path, trailing: int = 5, tol: float = 1.0) -> Path:
    """Strongest saved checkpoint of a run, judged from its training curve.

    Each saved checkpoint is scored by the mean of the `trailing` evaluation
    rows at or before its step; the latest checkpoint scoring within `tol` of
    the best wins, so the most-trained parameters are preferred unless they
    are meaningfully worse.  Long PPO runs can degrade after converging (a
    saturated, near-deterministic policy is one destructive update away from
    collapse), so cross-size comparisons resolve run directories through this
    selection rather than blindly taking the final parameters.
    """
    run_dir = Path(run_dir)
    steps, rewards = _read_log_curve(run_dir / "log.csv")
    candidates: dict[int, Path] = {}
    for path in sorted(run_dir.glob("checkpoint_*.ckpt")):
        candidates[int(path.stem.split("_")[1])] = path
    final = run_dir / "final.ckpt"
    if final.exists():
        final_step = int(steps[-1]) if len(steps) else max(candidates, default=0)
        candidates[final_step] = final
    if not candidates:
        raise FileNotFoundError(f"no checkpoints under {run_dir}")
    if len(rewards) == 0:
        return candidates[max(candidates)]

    def score(step: int) -> float:
        before = rewards[steps <= step]
        window = before[-trailing:] if len(before) else rewards[:1]
        return float(window.mean())

    best = max(score(s) for s in candidates)
    return candidates[max(s for s in candidates if score(s) >= best - tol)]


def ensure_runs(
    runs: list[tuple[str, RunConfig]], out_root: str | Path
) -> dict[str, Path]:
    """Train any run whose artifacts are absent or stale; reuse the rest.

    A cached run is valid when its config snapshot matches and both the log and
    the final checkpoint exist; training is deterministic per seed, so reuse
    reproduces exactly what retraining would.
    """
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    dirs: dict[str, Path] = {}
    for name, config in runs:
        run_dir = out_root / name
        snapshot = run_dir / "config.json"
        fresh = (
            snapshot.exists()
            and (run_dir / "log.csv").exists()
            and (run_dir / "final.ckpt").exists()
            # json round trip normalises tuples to lists before comparing
            and json.loads(snapshot.read_text()) == json.loads(json.dumps(config.to_dict()))
        )
        if not fresh:
            train(config, run_dir)
        dirs[name] = run_dir
    return dirs


# --- plots ----------------------------------------------------------------------------


def _read_log_curve(path: Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    steps = np.array([float(r["env_steps"]) for r in rows])
    rewards = np.array([float(r["episodic_reward"]) for r in rows])
    return steps, rewards


def discover_runs(runs_dir: str | Path) -> dict[int, dict[tuple[str, str], list[Path]]]:
    """Map node size -> (policy, regime) -> per-seed log paths."""
    found: dict[int, dict[tuple[str, str], list[Path]]] = {}
    for child in sorted(Path(runs_dir).iterdir()):
        m = _RUN_DIR_RE.match(child.name)
        if m is None or not (child / "log.csv").exists():
            continue
        policy, regime, nodes = m.group(1), m.group(2), int(m.group(3))
        found.setdefault(nodes, {}).setdefault((policy, regime), []).append(child / "log.csv")
    return found


_TRACE_STYLE = {
    ("entity", "random"): "tab:blue",
    ("entity", "static"): "tab:orange",
    ("mlp", "random"): "tab:green",
    ("mlp", "static"): "tab:red",
}


def emit_plots(runs_dir: str | Path, out_dir: str | Path) -> tuple[list[Path], list[str]]:
    """Training-curve figures (mean over seeds, min-max band) and per-eval-size
    box plots; returns (written paths, missing inputs)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    runs_dir, out_dir = Path(runs_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    missing: list[str] = []

    by_size = discover_runs(runs_dir)
    if not by_size:
        missing.append(f"no training logs under {runs_dir}")
    for nodes, traces in sorted(by_size.items()):
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for key, colour in _TRACE_STYLE.items():
            logs = traces.get(key)
            if not logs:
                missing.append(f"{run_name(*key, nodes, 0).rsplit('_seed', 1)[0]}: no runs")
                continue
            curves = [_read_log_curve(p) for p in logs]
            length = min(len(s) for s, _ in curves)
            steps = curves[0][0][:length]
            stack = np.stack([r[:length] for _, r in curves])
            label = f"{key[0]}-{key[1]}"
            ax.plot(steps, stack.mean(axis=0), color=colour, label=label)
            ax.fill_between(steps, stack.min(axis=0), stack.max(axis=0), color=colour, alpha=0.2)
        ax.set_xlabel("environment steps")
        ax.set_ylabel("episodic reward")
        ax.set_title(f"Training on {nodes}-node networks")
        ax.legend(loc="lower right")
        fig.tight_layout()
        for ext in ("svg", "png"):
            path = out_dir / f"training_curves_{nodes}n.{ext}"
            fig.savefig(path)
            written.append(path)
        plt.close(fig)

    cells: dict[int, dict[int, np.ndarray]] = {}
    for path in sorted(runs_dir.rglob("eval_rand_*_on_*.csv")):
        m = re.match(r"^eval_rand_(\d+)_on_(\d+)\.csv$", path.name)
        if m is None:
            continue
        t, e = int(m.group(1)), int(m.group(2))
        cells.setdefault(e, {})[t] = read_rewards_csv(path)
    if not cells:
        missing.append(f"no evaluation reports (eval_rand_*_on_*.csv) under {runs_dir}")
    for eval_size, by_train in sorted(cells.items()):
        fig, ax = plt.subplots(figsize=(6, 4.5))
        train_sizes = sorted(by_train)
        # whis=(0, 100): whiskers at min/max so the rendering matches summarize
        ax.boxplot([by_train[t] for t in train_sizes], whis=(0, 100))
        ax.set_xticks(range(1, len(train_sizes) + 1))
        ax.set_xticklabels([f"train {t}" for t in train_sizes])
        ax.set_ylabel("episodic reward")
        ax.set_title(f"Zero-shot evaluation on {eval_size}-node networks")
        fig.tight_layout()
        for ext in ("svg", "png"):
            path = out_dir / f"boxplot_eval_{eval_size}n.{ext}"
            fig.savefig(path)
            written.append(path)
        plt.close(fig)
    return written, missing
