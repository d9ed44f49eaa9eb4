"""Clipped-surrogate PPO with generalized advantage estimation.

Works over either policy family through the shared sample/evaluate interface,
stepping a vectorized environment for rollouts and applying minibatch Adam
updates with per-minibatch advantage normalization.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import NumericalFault
from . import autodiff as ad
from .autodiff import Tensor
from .env import (
    EnvRegime,
    NetworkEnv,
    VecEnv,
    build_static_network,
    compose_entity_action,
)
from .policy import CompositeAction, EntityPolicy, EntityPolicyConfig, MlpPolicy, MlpPolicyConfig
from .rng import derive_seed, np_stream


@dataclass(frozen=True)
class PPOConfig:
    total_steps: int = 1_000_000
    num_envs: int = 16
    rollout_len: int = 128
    epochs: int = 4
    minibatches: int = 4
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    max_grad_norm: float = 0.5
    learning_rate: float = 0.005
    eval_interval: int = 10_000
    eval_episodes: int = 1

    def __post_init__(self) -> None:
        for name in ("total_steps", "num_envs", "rollout_len", "epochs", "minibatches",
                     "eval_interval", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if (self.num_envs * self.rollout_len) % self.minibatches != 0:
            raise ValueError("num_envs * rollout_len must divide into minibatches")
        for name in ("gamma", "lam", "clip_eps", "value_coef", "entropy_coef",
                     "max_grad_norm", "learning_rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "total_steps": self.total_steps,
            "num_envs": self.num_envs,
            "rollout_len": self.rollout_len,
            "epochs": self.epochs,
            "minibatches": self.minibatches,
            "gamma": self.gamma,
            "lam": self.lam,
            "clip_eps": self.clip_eps,
            "value_coef": self.value_coef,
            "entropy_coef": self.entropy_coef,
            "max_grad_norm": self.max_grad_norm,
            "learning_rate": self.learning_rate,
            "eval_interval": self.eval_interval,
            "eval_episodes": self.eval_episodes,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PPOConfig":
        return cls(**doc)


DEFAULT_LEARNING_RATES = {"entity": 0.005, "mlp": 0.0003}


class RolloutBuffer:
    """Fixed-capacity (rollout_len × num_envs) transition store."""

    def __init__(self, num_envs: int, rollout_len: int):
        self.num_envs = num_envs
        self.rollout_len = rollout_len
        self.observations: list[list] = []
        shape = (rollout_len, num_envs)
        self.type_indices = np.zeros(shape, dtype=np.intp)
        self.node_indices = np.zeros(shape, dtype=np.intp)
        self.log_probs = np.zeros(shape)
        self.values = np.zeros(shape)
        self.rewards = np.zeros(shape)
        self.dones = np.zeros(shape, dtype=bool)
        self.bootstrap_values = np.zeros(num_envs)
        self.advantages: np.ndarray | None = None
        self.returns: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.num_envs * self.rollout_len

    def add(self, obs_list, actions, log_probs, values, rewards, dones) -> None:
        if len(self.observations) >= self.rollout_len:
            raise ValueError("rollout buffer already full")
        t = len(self.observations)
        self.observations.append(list(obs_list))
        self.type_indices[t] = [a.type_index for a in actions]
        self.node_indices[t] = [a.node_index for a in actions]
        self.log_probs[t] = log_probs
        self.values[t] = values
        self.rewards[t] = rewards
        self.dones[t] = dones

    def flatten(self):
        """Time-major flat views: observation list, actions, and per-sample
        log-probs/advantages/returns aligned by index."""
        if self.advantages is None:
            raise ValueError("compute_gae must run before flattening")
        obs = [o for step in self.observations for o in step]
        actions = [
            CompositeAction(int(t), int(n))
            for t, n in zip(self.type_indices.reshape(-1), self.node_indices.reshape(-1))
        ]
        return (
            obs,
            actions,
            self.log_probs.reshape(-1),
            self.advantages.reshape(-1),
            self.returns.reshape(-1),
        )


def collect_rollouts(vec: VecEnv, policy, config: PPOConfig, rng) -> RolloutBuffer:
    """Step every instance rollout_len times, recording transitions and the
    bootstrap values of the trailing observations."""
    if len(vec) != config.num_envs:
        raise ValueError(f"{len(vec)} environments for num_envs={config.num_envs}")
    buffer = RolloutBuffer(config.num_envs, config.rollout_len)
    obs = vec.observations
    for _ in range(config.rollout_len):
        actions, log_probs, values = policy.sample_batch(obs, rng)
        blue = [
            compose_entity_action(a.type_index, a.node_index, env.node_count)
            for a, env in zip(actions, vec.envs)
        ]
        next_obs, rewards, dones = vec.step(blue)
        buffer.add(obs, actions, log_probs, values, rewards, dones)
        obs = next_obs
    buffer.bootstrap_values = policy.value_batch(obs)
    return buffer


def compute_gae(buffer: RolloutBuffer, gamma: float, lam: float) -> None:
    """Fill advantages/returns: δ_t = r_t + γ·v_{t+1}·(1−done_t) − v_t,
    A_t = δ_t + γλ(1−done_t)·A_{t+1}, returns = A + v; done cuts the tail."""
    T = buffer.rollout_len
    adv = np.zeros_like(buffer.rewards)
    next_values = buffer.bootstrap_values
    carry = np.zeros(buffer.num_envs)
    for t in range(T - 1, -1, -1):
        alive = 1.0 - buffer.dones[t]
        delta = buffer.rewards[t] + gamma * next_values * alive - buffer.values[t]
        carry = delta + gamma * lam * alive * carry
        adv[t] = carry
        next_values = buffer.values[t]
    buffer.advantages = adv
    buffer.returns = adv + buffer.values


def ppo_objective(
    log_probs: Tensor,
    values: Tensor,
    entropies: Tensor,
    old_log_probs: np.ndarray,
    advantages: np.ndarray,
    returns: np.ndarray,
    config: PPOConfig,
):
    """Total loss plus scalar diagnostics for one minibatch."""
    adv = (advantages - advantages.mean()) / (advantages.std() + 1e-8)
    dtype = log_probs.data.dtype
    adv_t = Tensor(adv.astype(dtype))
    ratio = ad.exp(log_probs - Tensor(old_log_probs.astype(dtype)))
    unclipped = ratio * adv_t
    clipped = ad.clip(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps) * adv_t
    policy_loss = -ad.minimum(unclipped, clipped).mean()
    value_loss = ((values - Tensor(returns.astype(dtype))) ** 2.0).mean()
    entropy = entropies.mean()
    total = policy_loss + config.value_coef * value_loss - config.entropy_coef * entropy
    clip_fraction = float(
        np.mean((ratio.data < 1.0 - config.clip_eps) | (ratio.data > 1.0 + config.clip_eps))
    )
    return total, {
        "policy_loss": float(policy_loss.data),
        "value_loss": float(value_loss.data),
        "entropy": float(entropy.data),
        "clip_fraction": clip_fraction,
    }


def ppo_update(
    policy, buffer: RolloutBuffer, config: PPOConfig, shuffle_rng, optimizer_step: int
) -> tuple[dict, int]:
    """Run the epoch/minibatch update sweep; returns averaged metrics and the
    advanced Adam step counter. A non-finite loss aborts the sweep and flags
    numerical_fault in the metrics without touching parameters further."""
    obs, actions, old_log_probs, advantages, returns = buffer.flatten()
    batch_size = len(obs)
    minibatch_size = batch_size // config.minibatches
    params = policy.parameters()
    totals: dict[str, float] = {}
    updates = 0
    fault = False
    for _ in range(config.epochs):
        perm = shuffle_rng.permutation(batch_size)
        for m in range(config.minibatches):
            idx = perm[m * minibatch_size : (m + 1) * minibatch_size]
            log_probs, values, entropies = policy.evaluate_batch(
                [obs[i] for i in idx], [actions[i] for i in idx]
            )
            loss, metrics = ppo_objective(
                log_probs, values, entropies,
                old_log_probs[idx], advantages[idx], returns[idx], config,
            )
            if not np.isfinite(loss.data):
                fault = True
                break
            ad.zero_grads(params)
            loss.backward()
            metrics["grad_norm"] = ad.clip_global_norm(params, config.max_grad_norm)
            optimizer_step += 1
            ad.adam_step(params, config.learning_rate, optimizer_step)
            updates += 1
            for key, value in metrics.items():
                totals[key] = totals.get(key, 0.0) + value
        if fault:
            break
    averaged = {key: value / max(updates, 1) for key, value in totals.items()}
    averaged["numerical_fault"] = fault
    return averaged, optimizer_step


# --- training loop -----------------------------------------------------------------


LOG_COLUMNS = (
    "env_steps",
    "episodic_reward",
    "policy_loss",
    "value_loss",
    "entropy",
    "clip_fraction",
    "grad_norm",
    "wall_time_s",
)


@dataclass
class TrainResult:
    rows: list[dict]
    policy: object
    out_dir: Path | None
    log_path: Path | None
    final_checkpoint: Path | None
    checkpoints: list[Path] = field(default_factory=list)


def episode_reward(env: NetworkEnv, policy, action_rng) -> float:
    """One full sampled episode; returns the episodic reward total."""
    obs = env.reset()
    total = 0.0
    done = False
    while not done:
        actions, _, _ = policy.sample_batch([obs], action_rng)
        blue = compose_entity_action(
            actions[0].type_index, actions[0].node_index, env.node_count
        )
        obs = env.step(blue)
        total += obs.reward
        done = obs.done
    return total


def build_policy(family: str, nodes: int, entity_config: EntityPolicyConfig, seed: int,
                 mlp_hidden: int = 64):
    if family == "entity":
        return EntityPolicy(entity_config, seed=seed)
    if family == "mlp":
        return MlpPolicy(MlpPolicyConfig(node_count=nodes, hidden_width=mlp_hidden), seed=seed)
    raise ValueError(f"unknown policy family {family!r}")


def build_training_envs(mode: str, nodes: int, seed: int, game, num_envs: int):
    """num_envs rollout instances plus one held-out evaluation instance; in
    the static regime all of them share a single cached network."""
    shared = None
    if mode == "static":
        shared = build_static_network(
            EnvRegime(mode, nodes, derive_seed(seed, "network")), game
        )
    envs = [
        NetworkEnv(EnvRegime(mode, nodes, derive_seed(seed, "env", i)), game,
                   static_network=shared)
        for i in range(num_envs)
    ]
    eval_env = NetworkEnv(
        EnvRegime(mode, nodes, derive_seed(seed, "eval-env")), game,
        static_network=shared,
    )
    return VecEnv(envs), eval_env


def train(config, out_dir: str | Path | None = None) -> TrainResult:
    """Full training run driven by a run-config object (fields: policy, mode,
    nodes, seed, game, ppo, entity, mlp_hidden). Writes config snapshot,
    CSV log, periodic checkpoints and final checkpoint when out_dir is set."""
    ppo: PPOConfig = config.ppo
    start = time.monotonic()
    vec, eval_env = build_training_envs(
        config.mode, config.nodes, config.seed, config.game, ppo.num_envs
    )
    policy = build_policy(
        config.policy, config.nodes, config.entity,
        derive_seed(config.seed, "policy"), config.mlp_hidden,
    )

    rows: list[dict] = []
    checkpoints: list[Path] = []
    log_path = final_path = None
    writer = log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2))
        log_path = out_dir / "log.csv"
        log_file = open(log_path, "w", newline="")
        writer = csv.DictWriter(log_file, fieldnames=LOG_COLUMNS)
        writer.writeheader()

    rollout_rng = np_stream(config.seed, "rollout-actions")
    shuffle_rng = np_stream(config.seed, "shuffle")
    checkpoint_interval = max(ppo.total_steps // 4, 1)

    steps = 0
    optimizer_step = 0
    eval_index = 0
    fault = False
    vec.reset()
    try:
        while steps < ppo.total_steps:
            buffer = collect_rollouts(vec, policy, ppo, rollout_rng)
            previous = steps
            steps += buffer.size
            compute_gae(buffer, ppo.gamma, ppo.lam)
            metrics, optimizer_step = ppo_update(
                policy, buffer, ppo, shuffle_rng, optimizer_step
            )
            fault = metrics.pop("numerical_fault", False)
            if fault or steps // ppo.eval_interval > previous // ppo.eval_interval:
                eval_index += 1
                returns = [
                    episode_reward(
                        eval_env, policy, np_stream(config.seed, "eval-actions", eval_index, k)
                    )
                    for k in range(ppo.eval_episodes)
                ]
                row = {
                    "env_steps": steps,
                    "episodic_reward": float(np.mean(returns)),
                    **{k: metrics.get(k, float("nan")) for k in LOG_COLUMNS[2:-1]},
                    "wall_time_s": time.monotonic() - start,
                }
                rows.append(row)
                if writer is not None:
                    writer.writerow(row)
                    log_file.flush()
            if fault:
                raise NumericalFault(
                    f"non-finite loss at {steps} environment steps"
                )
            if out_dir is not None and steps // checkpoint_interval > previous // checkpoint_interval:
                path = out_dir / f"checkpoint_{steps:09d}.ckpt"
                policy.save(path, extra_meta={"env_steps": steps})
                checkpoints.append(path)
    finally:
        if log_file is not None:
            log_file.close()
    if out_dir is not None:
        final_path = out_dir / "final.ckpt"
        policy.save(final_path, extra_meta={"env_steps": steps})
    return TrainResult(
        rows=rows,
        policy=policy,
        out_dir=out_dir,
        log_path=log_path,
        final_checkpoint=final_path,
        checkpoints=checkpoints,
    )
