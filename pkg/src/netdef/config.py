"""Run configuration: one document covering game, regime, policy and PPO."""

from __future__ import annotations

import json

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from dataclasses import dataclass, field
from pathlib import Path

from .game import GameConfig
from .policy import EntityPolicyConfig
from .ppo import DEFAULT_LEARNING_RATES, PPOConfig


@dataclass(frozen=True)
class RunConfig:
    policy: str = "entity"
    mode: str = "random"
    nodes: int = 10
    seed: int = 0
    game: GameConfig = field(default_factory=GameConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    entity: EntityPolicyConfig = field(default_factory=EntityPolicyConfig)
    mlp_hidden: int = 64
    out_dir: str | None = None

    def __post_init__(self) -> None:
        if self.policy not in ("entity", "mlp"):
            raise ValueError(f"policy must be 'entity' or 'mlp', got {self.policy!r}")
        if self.mode not in ("static", "random"):
            raise ValueError(f"mode must be 'static' or 'random', got {self.mode!r}")
        if self.nodes < 1:
            raise ValueError("nodes must be >= 1")
        if self.mlp_hidden < 1:
            raise ValueError("mlp_hidden must be >= 1")

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "mode": self.mode,
            "nodes": self.nodes,
            "seed": self.seed,
            "game": self.game.to_dict(),
            "ppo": self.ppo.to_dict(),
            "entity": self.entity.to_dict(),
            "mlp_hidden": self.mlp_hidden,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        doc = dict(doc)
        policy = doc.get("policy", "entity")
        ppo_doc = dict(doc.get("ppo", {}))
        if "learning_rate" not in ppo_doc and policy in DEFAULT_LEARNING_RATES:
            ppo_doc["learning_rate"] = DEFAULT_LEARNING_RATES[policy]
        return cls(
            policy=policy,
            mode=doc.get("mode", "random"),
            nodes=int(doc.get("nodes", 10)),
            seed=int(doc.get("seed", 0)),
            game=GameConfig.from_dict(doc.get("game", {})),
            ppo=PPOConfig.from_dict(ppo_doc),
            entity=EntityPolicyConfig.from_dict(doc.get("entity", {})),
            mlp_hidden=int(doc.get("mlp_hidden", 64)),
            out_dir=doc.get("out_dir"),
        )


def load_run_config(path: str | Path) -> RunConfig:
    """Read a JSON or TOML run-config document."""
    path = Path(path)
    if path.suffix == ".toml":
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    elif path.suffix == ".json":
        doc = json.loads(path.read_text())
    else:
        raise ValueError(f"config must be .json or .toml, got {path.name}")
    return RunConfig.from_dict(doc)
