"""Attacker/defender game dynamics on a network topology.

A scripted red agent spreads from entry nodes through the graph; the blue
agent (the learner) acts on one node per step. Episodes have a fixed length
and the per-step reward is the fraction of uncompromised nodes.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import IntEnum

from .netgen import Topology


class ActionKind(IntEnum):
    REDUCE_VULNERABILITY = 0
    RESTORE_NODE = 1


# Categorical-head labels, index-aligned with ActionKind.
TYPE_LABELS = ("ReduceVulnerability", "RestoreNode")


@dataclass(frozen=True)
class BlueAction:
    kind: ActionKind
    target: int


@dataclass(frozen=True)
class GameConfig:
    """Game dynamics knobs; defaults give the contested baseline scenario."""

    red_skill: float = 0.5
    attack_noise_scale: float = 100.0
    zero_day_interval: int = 3
    vuln_reduction: float = 0.2
    vuln_floor: float = 0.01
    episode_length: int = 100
    vuln_init_range: tuple[float, float] = (0.2, 0.8)

    def __post_init__(self) -> None:
        lo, hi = self.vuln_init_range
        if not 0.0 <= self.red_skill <= 1.0:
            raise ValueError(f"red_skill must be in [0,1], got {self.red_skill}")
        if self.attack_noise_scale <= 0:
            raise ValueError("attack_noise_scale must be positive")
        if self.zero_day_interval < 1:
            raise ValueError("zero_day_interval must be >= 1")
        if not 0.0 < self.vuln_reduction < 1.0:
            raise ValueError("vuln_reduction must be in (0,1)")
        if not self.vuln_floor < lo <= hi <= 1.0:
            raise ValueError(
                f"need vuln_floor < lo <= hi <= 1, got floor={self.vuln_floor}, "
                f"range=({lo},{hi})"
            )
        if self.episode_length < 1:
            raise ValueError("episode_length must be >= 1")

    def to_dict(self) -> dict:
        return {
            "red_skill": self.red_skill,
            "attack_noise_scale": self.attack_noise_scale,
            "zero_day_interval": self.zero_day_interval,
            "vuln_reduction": self.vuln_reduction,
            "vuln_floor": self.vuln_floor,
            "episode_length": self.episode_length,
            "vuln_init_range": list(self.vuln_init_range),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GameConfig":
        doc = dict(doc)
        if "vuln_init_range" in doc:
            doc["vuln_init_range"] = tuple(doc["vuln_init_range"])
        return cls(**doc)


@dataclass
class NodeState:
    vulnerability: float
    original_vulnerability: float
    compromised: bool = False
    is_entry: bool = False


@dataclass
class GameState:
    topology: Topology
    nodes: list[NodeState]
    step: int = 0
    zero_day_counter: int = 0
    adjacency: list[set[int]] = field(default_factory=list)

    @property
    def node_count(self) -> int:
        return self.topology.node_count

    @property
    def compromised_count(self) -> int:
        return sum(1 for n in self.nodes if n.compromised)


def reset(
    topology: Topology,
    config: GameConfig,
    rng: random.Random,
    originals: list[float] | None = None,
) -> GameState:
    """Fresh episode state; `originals` restores stored vulnerabilities
    instead of drawing new ones (used when a fixed network is reused)."""
    lo, hi = config.vuln_init_range
    if originals is None:
        originals = [rng.uniform(lo, hi) for _ in range(topology.node_count)]
    elif len(originals) != topology.node_count:
        raise ValueError("originals length must match node count")
    nodes = [
        NodeState(
            vulnerability=v,
            original_vulnerability=v,
            compromised=False,
            is_entry=(i in topology.entry_nodes),
        )
        for i, v in enumerate(originals)
    ]
    return GameState(
        topology=topology, nodes=nodes, adjacency=topology.neighbours()
    )


def attack_strength(s: float, v: float) -> float:
    """100 s^2 / (s + (1 - v)); zero-skill attacks on v=1 are defined as 0."""
    denom = s + (1.0 - v)
    if denom == 0.0:
        return 0.0
    return 100.0 * s * s / denom


def basic_attack(
    state: GameState, target: int, config: GameConfig, rng: random.Random
) -> bool:
    """Noisy attack on an uncompromised node; compromises it iff a > t with
    t drawn from N(0, attack_noise_scale)."""
    node = state.nodes[target]
    if node.compromised:
        raise ValueError(f"node {target} is already compromised")
    a = attack_strength(config.red_skill, node.vulnerability)
    t = rng.gauss(0.0, config.attack_noise_scale)
    if a > t:
        node.compromised = True
        return True
    return False


def attack_surface(state: GameState) -> set[int]:
    """Uncompromised entry nodes plus uncompromised neighbours of
    compromised nodes."""
    surface = {
        i for i, n in enumerate(state.nodes) if n.is_entry and not n.compromised
    }
    for i, n in enumerate(state.nodes):
        if n.compromised:
            for j in state.adjacency[i]:
                if not state.nodes[j].compromised:
                    surface.add(j)
    return surface


def red_turn(state: GameState, config: GameConfig, rng: random.Random) -> None:
    """One attacker move: counter ticks every turn; an available zero-day
    (counter >= interval) takes priority and always succeeds, otherwise a
    basic attack is attempted. An empty attack surface means no attack."""
    state.zero_day_counter += 1
    surface = attack_surface(state)
    if not surface:
        return
    target = rng.choice(sorted(surface))
    if state.zero_day_counter >= config.zero_day_interval:
        state.nodes[target].compromised = True
        state.zero_day_counter = 0
    else:
        basic_attack(state, target, config, rng)


def apply_blue_action(
    state: GameState, action: BlueAction, config: GameConfig
) -> None:
    if not 0 <= action.target < state.node_count:
        raise ValueError(f"target {action.target} outside [0,{state.node_count})")
    node = state.nodes[action.target]
    if action.kind == ActionKind.REDUCE_VULNERABILITY:
        node.vulnerability = max(
            config.vuln_floor, node.vulnerability - config.vuln_reduction
        )
    elif action.kind == ActionKind.RESTORE_NODE:
        node.compromised = False
        node.vulnerability = node.original_vulnerability
    else:  # pragma: no cover - IntEnum exhausts the kinds
        raise ValueError(f"unknown action kind {action.kind!r}")


def compute_reward(state: GameState) -> float:
    n = state.node_count
    return (n - state.compromised_count) / n


def step(
    state: GameState,
    blue_action: BlueAction,
    config: GameConfig,
    rng: random.Random,
) -> tuple[float, bool]:
    """Advance one environment step (blue acts, then red), mutating `state`;
    returns (reward, done)."""
    if state.step >= config.episode_length:
        raise RuntimeError("episode already finished; reset before stepping")
    apply_blue_action(state, blue_action, config)
    red_turn(state, config, rng)
    state.step += 1
    reward = compute_reward(state)
    done = state.step == config.episode_length
    return reward, done
