"""Environment interfaces over the game: entity-based and flat views.

The entity view emits per-node feature rows (any node count); the flat view
concatenates them into a fixed vector for the MLP baseline. A vectorised
wrapper steps several instances with auto-reset for rollout collection.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO

import numpy as np

from . import netgen
from . import game as g
from .game import ActionKind, BlueAction, GameConfig, GameState, TYPE_LABELS
from .rng import substream

NODE_TYPE = "node"
FEATURES = ("vulnerability", "compromised")


@dataclass
class EntityObservation:
    """Per-type entity feature rows plus the latest step's reward/done.

    entities[NODE_TYPE] is a (k, 2) array; row i holds node i's
    [vulnerability, compromised] features.
    """

    entities: dict[str, np.ndarray]
    reward: float = 0.0
    done: bool = False

    @property
    def nodes(self) -> np.ndarray:
        return self.entities[NODE_TYPE]


@dataclass(frozen=True)
class ActionSpaceSpec:
    """Two independent heads: a global action-type choice and a node pick."""

    type_labels: tuple[str, ...] = TYPE_LABELS
    select_actor: str = "defender"
    select_actee: str = NODE_TYPE


ACTION_SPACE = ActionSpaceSpec()


@dataclass(frozen=True)
class EnvRegime:
    """Topology regime: 'static' fixes one network per run (entry node still
    varies per episode); 'random' regenerates the network every episode."""

    mode: str
    node_count: int
    seed: int
    edge_prob: float = 0.1
    entry_count: int = 1

    def __post_init__(self) -> None:
        if self.mode not in ("static", "random"):
            raise ValueError(f"mode must be 'static' or 'random', got {self.mode!r}")
        if self.node_count < 1:
            raise ValueError("node_count must be >= 1")
        if not 1 <= self.entry_count <= self.node_count:
            raise ValueError("entry_count must be in [1, node_count]")


def build_static_network(regime: EnvRegime, config: GameConfig) -> tuple:
    """One topology plus its original vulnerabilities, fixed for a whole run."""
    topo = netgen.generate_er_graph(
        regime.node_count, regime.edge_prob, substream(regime.seed, "topology", 0)
    )
    vuln_rng = substream(regime.seed, "vulns", 0)
    lo, hi = config.vuln_init_range
    originals = [vuln_rng.uniform(lo, hi) for _ in range(regime.node_count)]
    return topo, originals


def entity_observe(
    state: GameState, reward: float = 0.0, done: bool = False
) -> EntityObservation:
    """Entity view of a state; reward/done default to post-reset values."""
    rows = np.empty((state.node_count, 2), dtype=np.float64)
    for i, node in enumerate(state.nodes):
        rows[i, 0] = node.vulnerability
        rows[i, 1] = 1.0 if node.compromised else 0.0
    return EntityObservation(entities={NODE_TYPE: rows}, reward=reward, done=done)


def flat_observe(state: GameState) -> np.ndarray:
    """[v_0, c_0, v_1, c_1, ...] as one length-2n vector."""
    return entity_observe(state).nodes.reshape(-1)


def decode_flat_action(index: int, node_count: int) -> BlueAction:
    """Type-major layout: indices [0,n) reduce, [n,2n) restore."""
    if not 0 <= index < 2 * node_count:
        raise ValueError(f"flat action {index} outside [0,{2 * node_count})")
    kind = ActionKind.REDUCE_VULNERABILITY if index < node_count else ActionKind.RESTORE_NODE
    return BlueAction(kind=kind, target=index % node_count)


def encode_flat_action(action: BlueAction, node_count: int) -> int:
    if not 0 <= action.target < node_count:
        raise ValueError(f"target {action.target} outside [0,{node_count})")
    return int(action.kind) * node_count + action.target


def compose_entity_action(
    type_choice: int, node_choice: int, node_count: int
) -> BlueAction:
    if type_choice not in (0, 1):
        raise ValueError(f"type choice must be 0 or 1, got {type_choice}")
    if not 0 <= node_choice < node_count:
        raise ValueError(f"node choice {node_choice} outside [0,{node_count})")
    return BlueAction(kind=ActionKind(type_choice), target=node_choice)


class NetworkEnv:
    """One game instance under a topology regime.

    reset() and step() return EntityObservation; flat_obs() gives the
    baseline's fixed-vector view of the same state. All randomness flows
    through named sub-streams of the regime seed, keyed by episode index,
    so trajectories are fully reproducible.
    """

    def __init__(
        self,
        regime: EnvRegime,
        config: GameConfig | None = None,
        trace: IO[str] | None = None,
        static_network: tuple | None = None,
    ):
        self.regime = regime
        self.config = config or GameConfig()
        self.state: GameState | None = None
        self._episode = -1
        self._red_rng = None
        self._trace = trace
        self.last_reward = 0.0
        self.last_done = False
        if regime.mode == "static":
            if static_network is not None:
                # several instances can share one cached network while keeping
                # their own entry/attacker streams
                self._static_topology, self._static_originals = static_network
                if self._static_topology.node_count != regime.node_count:
                    raise ValueError("shared network size differs from regime")
            else:
                self._static_topology, self._static_originals = build_static_network(
                    regime, self.config
                )

    @property
    def static_network(self) -> tuple:
        return self._static_topology, self._static_originals

    @property
    def node_count(self) -> int:
        return self.regime.node_count

    @property
    def episode(self) -> int:
        return self._episode

    def reset(self) -> EntityObservation:
        self._episode += 1
        ep, seed = self._episode, self.regime.seed
        if self.regime.mode == "static":
            topo, originals = self._static_topology, self._static_originals
        else:
            topo = netgen.generate_er_graph(
                self.regime.node_count, self.regime.edge_prob,
                substream(seed, "topology", ep),
            )
            originals = None
        topo = netgen.select_entry_nodes(
            topo, self.regime.entry_count, substream(seed, "entry", ep)
        )
        self.state = g.reset(
            topo, self.config, substream(seed, "vulns", ep), originals=originals
        )
        self._red_rng = substream(seed, "red", ep)
        self.last_reward = 0.0
        self.last_done = False
        return entity_observe(self.state)

    def step(self, action: BlueAction) -> EntityObservation:
        if self.state is None:
            raise RuntimeError("reset() must be called before step()")
        reward, done = g.step(self.state, action, self.config, self._red_rng)
        self.last_reward = reward
        self.last_done = done
        if self._trace is not None:
            self._trace.write(
                json.dumps(
                    {
                        "episode": self._episode,
                        "step": self.state.step,
                        "action": {"kind": TYPE_LABELS[action.kind], "target": action.target},
                        "reward": reward,
                        "compromised_count": self.state.compromised_count,
                    }
                )
                + "\n"
            )
        return entity_observe(self.state, reward=reward, done=done)

    def flat_obs(self) -> np.ndarray:
        if self.state is None:
            raise RuntimeError("reset() must be called before observing")
        return flat_observe(self.state)


def env_from_config(doc: dict) -> NetworkEnv:
    """Build an instance from {mode, nodes, seed, game: {...}}."""
    regime = EnvRegime(
        mode=doc["mode"],
        node_count=int(doc["nodes"]),
        seed=int(doc["seed"]),
        edge_prob=float(doc.get("edge_prob", 0.1)),
        entry_count=int(doc.get("entry_count", 1)),
    )
    config = GameConfig.from_dict(doc.get("game", {}))
    return NetworkEnv(regime, config)


def vec_env_step(
    envs: list[NetworkEnv], actions: list[BlueAction]
) -> list[tuple[EntityObservation, float, bool]]:
    """Step each instance; finished instances are reset and report the fresh
    episode's first observation alongside the terminal reward and done=True."""
    if len(envs) != len(actions):
        raise ValueError(f"{len(actions)} actions for {len(envs)} environments")
    out = []
    for env, action in zip(envs, actions):
        obs = env.step(action)
        reward, done = obs.reward, obs.done
        if done:
            obs = env.reset()
        out.append((obs, reward, done))
    return out


class VecEnv:
    """Lockstep wrapper over independent instances with auto-reset."""

    def __init__(self, envs: list[NetworkEnv]):
        if not envs:
            raise ValueError("need at least one environment")
        self.envs = envs
        self._obs: list[EntityObservation] | None = None

    def __len__(self) -> int:
        return len(self.envs)

    def reset(self) -> list[EntityObservation]:
        self._obs = [env.reset() for env in self.envs]
        return self._obs

    @property
    def observations(self) -> list[EntityObservation]:
        if self._obs is None:
            raise RuntimeError("reset() must be called first")
        return self._obs

    def step(
        self, actions: list[BlueAction]
    ) -> tuple[list[EntityObservation], np.ndarray, np.ndarray]:
        results = vec_env_step(self.envs, actions)
        self._obs = [obs for obs, _, _ in results]
        rewards = np.array([r for _, r, _ in results], dtype=np.float64)
        dones = np.array([d for _, _, d in results], dtype=bool)
        return self._obs, rewards, dones
