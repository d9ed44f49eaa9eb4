"""Policy networks over the autodiff engine.

The entity policy is a transformer over per-node tokens plus two learnable
special tokens, so one parameter set serves any node count: a global token
feeds the action-type and value heads, a defender token is the query of the
node-selection head (q·k/√d over node tokens). The MLP baseline consumes the
flat observation and emits one logit per flat action, fixing the node count
at construction.

Instances in a batch may have different node counts; rows with equal counts
are stacked into rectangular sub-batches so attention never crosses
instances and no padding is needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from . import NumericalFault
from .autodiff import Parameter, Tensor
from .rng import np_stream


class CompositeAction(NamedTuple):
    """Joint draw of the two independent heads."""

    type_index: int
    node_index: int


@dataclass(frozen=True)
class EntityPolicyConfig:
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 2
    d_ff: int = 128
    d_qk: int = 64
    feature_width: int = 2
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_layers": self.n_layers,
            "d_ff": self.d_ff,
            "d_qk": self.d_qk,
            "feature_width": self.feature_width,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EntityPolicyConfig":
        return cls(**doc)


@dataclass(frozen=True)
class MlpPolicyConfig:
    node_count: int
    hidden_width: int = 64
    feature_width: int = 2
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.node_count < 1:
            raise ValueError("node_count must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def input_width(self) -> int:
        return self.node_count * self.feature_width

    def to_dict(self) -> dict:
        return {
            "node_count": self.node_count,
            "hidden_width": self.hidden_width,
            "feature_width": self.feature_width,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MlpPolicyConfig":
        return cls(**doc)


def normalize_features(features: np.ndarray) -> np.ndarray:
    """Fixed rescale of [0,1] features to [-1,1]; no running statistics, so
    stored rollouts replay bit-identically."""
    return features * 2.0 - 1.0


# --- parameter construction -----------------------------------------------------


def _affine_init(seed: int, name: str, fan_in: int, fan_out: int, dtype) -> Parameter:
    bound = 1.0 / math.sqrt(fan_in)
    w = np_stream(seed, "init", name).uniform(-bound, bound, size=(fan_in, fan_out))
    return Parameter(name, w.astype(dtype))


def _token_init(seed: int, name: str, width: int, dtype) -> Parameter:
    t = np_stream(seed, "init", name).standard_normal(width) * 0.02
    return Parameter(name, t.astype(dtype))


def init_entity_params(config: EntityPolicyConfig, seed: int) -> dict[str, Parameter]:
    d, dt = config.d_model, config.np_dtype

    params: dict[str, Parameter] = {}

    def affine(name: str, fan_in: int, fan_out: int) -> None:
        params[f"{name}.w"] = _affine_init(seed, f"{name}.w", fan_in, fan_out, dt)
        params[f"{name}.b"] = Parameter(f"{name}.b", np.zeros(fan_out, dtype=dt))

    def norm(name: str) -> None:
        params[f"{name}.g"] = Parameter(f"{name}.g", np.ones(d, dtype=dt))
        params[f"{name}.b"] = Parameter(f"{name}.b", np.zeros(d, dtype=dt))

    affine("embed", config.feature_width, d)
    norm("embed.ln")
    params["global_token"] = _token_init(seed, "global_token", d, dt)
    params["defender_token"] = _token_init(seed, "defender_token", d, dt)
    for i in range(config.n_layers):
        norm(f"layers.{i}.ln1")
        for piece in ("wq", "wk", "wv", "wo"):
            affine(f"layers.{i}.attn.{piece}", d, d)
        norm(f"layers.{i}.ln2")
        affine(f"layers.{i}.ff.w1", d, config.d_ff)
        affine(f"layers.{i}.ff.w2", config.d_ff, d)
    affine("type_head", d, 2)
    params["select.wq"] = _affine_init(seed, "select.wq", d, config.d_qk, dt)
    params["select.wk"] = _affine_init(seed, "select.wk", d, config.d_qk, dt)
    affine("value_head", d, 1)
    return params


def init_mlp_params(config: MlpPolicyConfig, seed: int) -> dict[str, Parameter]:
    dt, width = config.np_dtype, config.hidden_width
    sizes = {
        "policy": (config.input_width, width, width, 2 * config.node_count),
        "value": (config.input_width, width, width, 1),
    }
    params: dict[str, Parameter] = {}
    for trunk, (d0, d1, d2, d3) in sizes.items():
        for i, (fi, fo) in enumerate(((d0, d1), (d1, d2), (d2, d3)), start=1):
            name = f"{trunk}.w{i}"
            params[name] = _affine_init(seed, name, fi, fo, dt)
            params[f"{trunk}.b{i}"] = Parameter(f"{trunk}.b{i}", np.zeros(fo, dtype=dt))
    return params


# --- entity forward --------------------------------------------------------------


@dataclass
class HeadOut:
    """Per-instance head outputs (differentiable views)."""

    type_logits: Tensor  # (2,)
    node_logits: Tensor  # (k,)
    value: Tensor  # scalar


@dataclass
class _GroupHeads:
    indices: list[int]  # original batch positions
    type_logits: Tensor  # (B, 2)
    node_logits: Tensor  # (B, k)
    values: Tensor  # (B,)


def _node_features(obs) -> np.ndarray:
    arr = obs.nodes if hasattr(obs, "nodes") else np.asarray(obs, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected (k, features) rows, got shape {arr.shape}")
    if arr.shape[0] < 1:
        raise ValueError("instances must contain at least one node")
    return arr


def _attention_block(x: Tensor, p: dict[str, Parameter], prefix: str, n_heads: int) -> Tensor:
    batch, tokens, d = x.shape
    dh = d // n_heads

    def split_heads(t: Tensor) -> Tensor:
        return t.reshape(batch, tokens, n_heads, dh).swapaxes(1, 2)

    q = split_heads(ad.affine(x, p[f"{prefix}.wq.w"], p[f"{prefix}.wq.b"]))
    k = split_heads(ad.affine(x, p[f"{prefix}.wk.w"], p[f"{prefix}.wk.b"]))
    v = split_heads(ad.affine(x, p[f"{prefix}.wv.w"], p[f"{prefix}.wv.b"]))
    att = ad.masked_scaled_dot_attention(q, k, v)
    merged = att.swapaxes(1, 2).reshape(batch, tokens, d)
    return ad.affine(merged, p[f"{prefix}.wo.w"], p[f"{prefix}.wo.b"])


def _transformer_trunk(
    features: np.ndarray, params: dict[str, Parameter], config: EntityPolicyConfig
) -> Tensor:
    """(B, k, feature_width) node features -> (B, k+2, d_model) token outputs
    with token order [global, defender, node_0..node_{k-1}]."""
    batch = features.shape[0]
    d = config.d_model
    x = Tensor(normalize_features(features).astype(config.np_dtype))
    h = ad.relu(
        ad.layer_norm(
            ad.affine(x, params["embed.w"], params["embed.b"]),
            params["embed.ln.g"],
            params["embed.ln.b"],
        )
    )
    anchor = Tensor(np.zeros((batch, 1, d), dtype=config.np_dtype))
    tokens = ad.concat(
        [
            anchor + params["global_token"].reshape(1, 1, d),
            anchor + params["defender_token"].reshape(1, 1, d),
            h,
        ],
        axis=1,
    )
    for i in range(config.n_layers):
        pre = ad.layer_norm(
            tokens, params[f"layers.{i}.ln1.g"], params[f"layers.{i}.ln1.b"]
        )
        tokens = tokens + _attention_block(pre, params, f"layers.{i}.attn", config.n_heads)
        pre = ad.layer_norm(
            tokens, params[f"layers.{i}.ln2.g"], params[f"layers.{i}.ln2.b"]
        )
        ff = ad.affine(
            ad.relu(ad.affine(pre, params[f"layers.{i}.ff.w1.w"], params[f"layers.{i}.ff.w1.b"])),
            params[f"layers.{i}.ff.w2.w"],
            params[f"layers.{i}.ff.w2.b"],
        )
        tokens = tokens + ff
    return tokens


def _heads_from_tokens(
    tokens: Tensor, params: dict[str, Parameter], config: EntityPolicyConfig
) -> tuple[Tensor, Tensor, Tensor]:
    batch, total_tokens, d = tokens.shape
    k = total_tokens - 2
    global_out = tokens[:, 0, :]
    defender_out = tokens[:, 1, :]
    node_out = tokens[:, 2:, :]
    type_logits = ad.affine(global_out, params["type_head.w"], params["type_head.b"])
    values = ad.affine(global_out, params["value_head.w"], params["value_head.b"]).reshape(batch)
    q = ad.matmul(defender_out, params["select.wq"]).reshape(batch, config.d_qk, 1)
    keys = ad.matmul(node_out, params["select.wk"])
    node_logits = ad.matmul(keys, q).reshape(batch, k) * (1.0 / math.sqrt(config.d_qk))
    return type_logits, node_logits, values


def _forward_grouped(
    batch, params: dict[str, Parameter], config: EntityPolicyConfig
) -> list[_GroupHeads]:
    arrays = [_node_features(obs) for obs in batch]
    by_size: dict[int, list[int]] = {}
    for i, arr in enumerate(arrays):
        by_size.setdefault(arr.shape[0], []).append(i)
    groups = []
    for size in sorted(by_size):
        indices = by_size[size]
        stacked = np.stack([arrays[i] for i in indices])
        tokens = _transformer_trunk(stacked, params, config)
        type_logits, node_logits, values = _heads_from_tokens(tokens, params, config)
        groups.append(_GroupHeads(indices, type_logits, node_logits, values))
    return groups


def entity_forward(
    batch, params: dict[str, Parameter], config: EntityPolicyConfig
) -> list[HeadOut]:
    """Per-instance (type_logits, node_logits, value); batch entries may have
    any node count >= 1 and are processed without padding."""
    out: list[HeadOut] = [None] * len(batch)
    for group in _forward_grouped(batch, params, config):
        for row, i in enumerate(group.indices):
            out[i] = HeadOut(
                type_logits=group.type_logits[row],
                node_logits=group.node_logits[row],
                value=group.values[row],
            )
    return out


# --- sampling and evaluation ------------------------------------------------------


# Sampling math stays in the policy's own dtype and mirrors the recorded-op
# formulas exactly, so evaluate_* reproduces sampled log-probs bit-for-bit.


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _check_finite(arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NumericalFault("policy produced non-finite logits")


def _draw(probs: np.ndarray, u: float) -> int:
    return int(min((np.cumsum(probs) < u).sum(), probs.size - 1))


def sample_action(head: HeadOut, rng: np.random.Generator) -> tuple[CompositeAction, float, float]:
    """Sample both heads independently; returns (action, log_prob, value)."""
    type_logits = head.type_logits.data
    node_logits = head.node_logits.data
    _check_finite(type_logits)
    _check_finite(node_logits)
    t = _draw(_softmax_np(type_logits), rng.random())
    n = _draw(_softmax_np(node_logits), rng.random())
    log_prob = float(_log_softmax_np(type_logits)[t] + _log_softmax_np(node_logits)[n])
    return CompositeAction(t, n), log_prob, float(head.value.data)


def evaluate_actions(
    batch, actions, params: dict[str, Parameter], config: EntityPolicyConfig
) -> tuple[Tensor, Tensor, Tensor]:
    """Differentiable (log_probs, values, entropies) for chosen actions."""
    types = np.asarray([a[0] for a in actions], dtype=np.intp)
    nodes = np.asarray([a[1] for a in actions], dtype=np.intp)
    if len(actions) != len(batch):
        raise ValueError(f"{len(actions)} actions for {len(batch)} instances")
    if not np.isin(types, (0, 1)).all():
        raise ValueError("type indices must be 0 or 1")
    for i, obs in enumerate(batch):
        k = _node_features(obs).shape[0]
        if not 0 <= nodes[i] < k:
            raise ValueError(f"action {i} selects node {nodes[i]} outside [0,{k})")
    groups = _forward_grouped(batch, params, config)
    log_probs, values, entropies, order = [], [], [], []
    for group in groups:
        idx = np.asarray(group.indices)
        lsm_t = ad.log_softmax(group.type_logits, axis=-1)
        lsm_n = ad.log_softmax(group.node_logits, axis=-1)
        lp = ad.row_gather(lsm_t, types[idx]) + ad.row_gather(lsm_n, nodes[idx])
        ent = (
            -(ad.softmax(group.type_logits, -1) * lsm_t).sum(axis=-1)
            - (ad.softmax(group.node_logits, -1) * lsm_n).sum(axis=-1)
        )
        log_probs.append(lp)
        values.append(group.values)
        entropies.append(ent)
        order.append(idx)
    inverse = np.argsort(np.concatenate(order))
    return (
        ad.concat(log_probs, axis=0)[inverse],
        ad.concat(values, axis=0)[inverse],
        ad.concat(entropies, axis=0)[inverse],
    )


def _sample_grouped(
    groups: list[_GroupHeads], n_instances: int, rng
) -> tuple[list[CompositeAction], np.ndarray, np.ndarray]:
    """rng is one Generator (two draws per instance, in batch order) or a list
    of per-instance Generators (order-independent; used by evaluation)."""
    if isinstance(rng, np.random.Generator):
        uniforms = rng.random((n_instances, 2))
    else:
        uniforms = np.stack([[r.random(), r.random()] for r in rng])
    actions: list[CompositeAction] = [None] * n_instances
    log_probs = np.empty(n_instances)
    values = np.empty(n_instances)
    for group in groups:
        _check_finite(group.type_logits.data)
        _check_finite(group.node_logits.data)
        p_type = _softmax_np(group.type_logits.data)
        p_node = _softmax_np(group.node_logits.data)
        l_type = _log_softmax_np(group.type_logits.data)
        l_node = _log_softmax_np(group.node_logits.data)
        for row, i in enumerate(group.indices):
            t = _draw(p_type[row], uniforms[i, 0])
            n = _draw(p_node[row], uniforms[i, 1])
            actions[i] = CompositeAction(t, n)
            log_probs[i] = l_type[row, t] + l_node[row, n]
            values[i] = group.values.data[row]
    return actions, log_probs, values


# --- mlp forward -------------------------------------------------------------------


def _flat_features(obs, config: MlpPolicyConfig) -> np.ndarray:
    """Accept a flat vector, (k, features) rows, or an entity observation."""
    arr = obs.nodes if hasattr(obs, "nodes") else np.asarray(obs, dtype=np.float64)
    arr = arr.reshape(-1)
    if arr.shape != (config.input_width,):
        raise ValueError(
            f"flat observation must have length {config.input_width}, got {arr.shape[0]}"
        )
    return arr


def _mlp_trunk(x: Tensor, params: dict[str, Parameter], trunk: str) -> Tensor:
    h = ad.tanh(ad.affine(x, params[f"{trunk}.w1"], params[f"{trunk}.b1"]))
    h = ad.tanh(ad.affine(h, params[f"{trunk}.w2"], params[f"{trunk}.b2"]))
    return ad.affine(h, params[f"{trunk}.w3"], params[f"{trunk}.b3"])


def mlp_forward_batch(
    batch, params: dict[str, Parameter], config: MlpPolicyConfig
) -> tuple[Tensor, Tensor]:
    rows = np.stack([_flat_features(obs, config) for obs in batch])
    x = Tensor(normalize_features(rows).astype(config.np_dtype))
    logits = _mlp_trunk(x, params, "policy")
    values = _mlp_trunk(x, params, "value").reshape(len(batch))
    return logits, values


def mlp_forward(obs, params: dict[str, Parameter], config: MlpPolicyConfig) -> tuple[Tensor, Tensor]:
    """Single-instance forward: (logits over 2n flat actions, value)."""
    logits, values = mlp_forward_batch([obs], params, config)
    return logits[0], values[0]


# --- policy objects ---------------------------------------------------------------


class EntityPolicy:
    """Entity transformer policy; one parameter set for every node count."""

    family = "entity"

    def __init__(self, config: EntityPolicyConfig, seed: int, params=None):
        self.config = config
        self.params = params if params is not None else init_entity_params(config, seed)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def supports_node_count(self, node_count: int) -> bool:
        return node_count >= 1

    def forward(self, batch) -> list[HeadOut]:
        return entity_forward(batch, self.params, self.config)

    def sample_batch(self, batch, rng):
        with ad.no_grad():
            groups = _forward_grouped(batch, self.params, self.config)
            return _sample_grouped(groups, len(batch), rng)

    def value_batch(self, batch) -> np.ndarray:
        with ad.no_grad():
            values = np.empty(len(batch))
            for group in _forward_grouped(batch, self.params, self.config):
                values[group.indices] = group.values.data
        return values

    def evaluate_batch(self, batch, actions):
        return evaluate_actions(batch, actions, self.params, self.config)

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {"family": self.family, "config": self.config.to_dict()}
        meta.update(extra_meta or {})
        ad.save_tensors(path, {n: p.data for n, p in self.params.items()}, meta)

    @classmethod
    def load(cls, path) -> "EntityPolicy":
        arrays, meta = ad.load_tensors(path)
        config = EntityPolicyConfig.from_dict(meta["config"])
        params = {name: Parameter(name, arr) for name, arr in arrays.items()}
        return cls(config, seed=0, params=params)


class MlpPolicy:
    """Flat-observation baseline; hard-wired to its construction node count."""

    family = "mlp"

    def __init__(self, config: MlpPolicyConfig, seed: int, params=None):
        self.config = config
        self.params = params if params is not None else init_mlp_params(config, seed)

    @property
    def node_count(self) -> int:
        return self.config.node_count

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def supports_node_count(self, node_count: int) -> bool:
        return node_count == self.config.node_count

    def _composite(self, flat_index: int) -> CompositeAction:
        n = self.config.node_count
        return CompositeAction(int(flat_index) // n, int(flat_index) % n)

    def sample_batch(self, batch, rng):
        with ad.no_grad():
            logits, values = mlp_forward_batch(batch, self.params, self.config)
        logits, values = logits.data, values.data
        _check_finite(logits)
        if isinstance(rng, np.random.Generator):
            uniforms = rng.random(len(batch))
        else:
            uniforms = np.array([r.random() for r in rng])
        probs = _softmax_np(logits)
        logp_all = _log_softmax_np(logits)
        actions, log_probs = [], np.empty(len(batch))
        for i in range(len(batch)):
            flat = _draw(probs[i], uniforms[i])
            actions.append(self._composite(flat))
            log_probs[i] = logp_all[i, flat]
        return actions, log_probs, values.astype(np.float64)

    def value_batch(self, batch) -> np.ndarray:
        with ad.no_grad():
            _, values = mlp_forward_batch(batch, self.params, self.config)
        return values.data.astype(np.float64)

    def evaluate_batch(self, batch, actions):
        n = self.config.node_count
        flat = np.asarray([a[0] * n + a[1] for a in actions], dtype=np.intp)
        if (flat < 0).any() or (flat >= 2 * n).any():
            raise ValueError("action outside the flat action space")
        logits, values = mlp_forward_batch(batch, self.params, self.config)
        lsm = ad.log_softmax(logits, axis=-1)
        log_probs = ad.row_gather(lsm, flat)
        entropy = -(ad.softmax(logits, -1) * lsm).sum(axis=-1)
        return log_probs, values, entropy

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {"family": self.family, "config": self.config.to_dict()}
        meta.update(extra_meta or {})
        ad.save_tensors(path, {n: p.data for n, p in self.params.items()}, meta)

    @classmethod
    def load(cls, path) -> "MlpPolicy":
        arrays, meta = ad.load_tensors(path)
        config = MlpPolicyConfig.from_dict(meta["config"])
        params = {name: Parameter(name, arr) for name, arr in arrays.items()}
        return cls(config, seed=0, params=params)


def load_policy(path):
    """Load either family from a checkpoint, dispatching on its manifest."""
    _, meta = ad.load_tensors(path)
    family = meta.get("family")
    if family == "entity":
        return EntityPolicy.load(path)
    if family == "mlp":
        return MlpPolicy.load(path)
    raise ValueError(f"unknown policy family {family!r} in {path}")
