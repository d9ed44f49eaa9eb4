import numpy as np
import pytest

from netdef import NumericalFault
from netdef import autodiff as ad
from netdef import policy as pol
from netdef.autodiff import Tensor
from netdef.policy import (
    CompositeAction,
    EntityPolicy,
    EntityPolicyConfig,
    HeadOut,
    MlpPolicy,
    MlpPolicyConfig,
    entity_forward,
    evaluate_actions,
    load_policy,
    mlp_forward,
    sample_action,
)
from netdef.rng import np_stream

TINY = EntityPolicyConfig(d_model=8, n_heads=1, n_layers=1, d_ff=8, d_qk=8)
TINY64 = EntityPolicyConfig(
    d_model=8, n_heads=1, n_layers=1, d_ff=8, d_qk=8, dtype="float64"
)


def random_obs(k: int, seed: int) -> np.ndarray:
    rng = np_stream(seed, "obs", k)
    v = rng.uniform(0.01, 1.0, size=k)
    c = (rng.random(k) < 0.4).astype(float)
    return np.stack([v, c], axis=1)


def test_config_validation():
    with pytest.raises(ValueError):
        EntityPolicyConfig(d_model=10, n_heads=3)
    with pytest.raises(ValueError):
        EntityPolicyConfig(n_layers=0)
    with pytest.raises(ValueError):
        MlpPolicyConfig(node_count=0)


def test_forward_output_shapes():
    policy = EntityPolicy(TINY, seed=0)
    heads = policy.forward([random_obs(5, 1), random_obs(9, 2)])
    assert heads[0].type_logits.shape == (2,)
    assert heads[0].node_logits.shape == (5,)
    assert heads[1].node_logits.shape == (9,)
    assert heads[0].value.shape == ()


def test_one_parameter_set_serves_any_size():
    policy = EntityPolicy(EntityPolicyConfig(), seed=3)
    heads = policy.forward([random_obs(10, 1), random_obs(40, 2), random_obs(1, 3)])
    assert [h.node_logits.shape[0] for h in heads] == [10, 40, 1]


def test_empty_instance_rejected():
    policy = EntityPolicy(TINY, seed=0)
    with pytest.raises(ValueError):
        policy.forward([np.empty((0, 2))])


def test_identical_nodes_get_identical_logits():
    policy = EntityPolicy(TINY, seed=4)
    obs = random_obs(6, 5)
    obs[4] = obs[1]
    (head,) = policy.forward([obs])
    logits = head.node_logits.data
    assert logits[4] == logits[1]


def test_permutation_equivariance():
    policy = EntityPolicy(EntityPolicyConfig(), seed=6)
    rng = np_stream(7, "perm")
    for trial in range(20):
        k = int(rng.integers(2, 30))
        obs = random_obs(k, 100 + trial)
        perm = rng.permutation(k)
        base, permuted = policy.forward([obs, obs[perm]])
        assert np.allclose(
            base.node_logits.data[perm], permuted.node_logits.data, atol=1e-5
        )
        assert np.allclose(base.type_logits.data, permuted.type_logits.data, atol=1e-5)
        assert abs(base.value.data - permuted.value.data) <= 1e-5


def test_cross_instance_isolation():
    policy = EntityPolicy(TINY, seed=8)
    a, b = random_obs(7, 9), random_obs(7, 10)
    first = policy.forward([a, b])[0]
    altered = policy.forward([a, random_obs(7, 11)])[0]
    assert np.array_equal(first.node_logits.data, altered.node_logits.data)
    assert np.array_equal(first.type_logits.data, altered.type_logits.data)
    assert first.value.data == altered.value.data


def test_mixed_sizes_match_single_instance_forward():
    policy = EntityPolicy(TINY64, seed=12)
    batch = [random_obs(12, 1), random_obs(5, 2), random_obs(12, 3), random_obs(5, 4)]
    together = policy.forward(batch)
    for obs, joint in zip(batch, together):
        (alone,) = policy.forward([obs])
        assert np.allclose(alone.node_logits.data, joint.node_logits.data, atol=1e-12)
        assert np.allclose(alone.type_logits.data, joint.type_logits.data, atol=1e-12)


# --- sampling ---------------------------------------------------------------------


def uniform_head(k: int) -> HeadOut:
    return HeadOut(
        type_logits=Tensor(np.zeros(2)),
        node_logits=Tensor(np.zeros(k)),
        value=Tensor(np.asarray(0.25)),
    )


def test_saturated_type_head_always_picks_first():
    head = HeadOut(
        type_logits=Tensor(np.array([20.0, -20.0])),
        node_logits=Tensor(np.zeros(3)),
        value=Tensor(np.asarray(0.0)),
    )
    rng = np_stream(0, "sat")
    assert all(sample_action(head, rng)[0].type_index == 0 for _ in range(100))


def test_uniform_node_sampling_frequencies():
    head = uniform_head(10)
    rng = np_stream(1, "freq")
    counts = np.zeros(10)
    for _ in range(100_000):
        action, log_prob, value = sample_action(head, rng)
        counts[action.node_index] += 1
    assert np.all(np.abs(counts / 100_000 - 0.1) < 0.01)


def test_sampled_log_probs_are_finite_and_nonpositive():
    policy = EntityPolicy(TINY, seed=13)
    batch = [random_obs(6, i) for i in range(8)]
    _, log_probs, values = policy.sample_batch(batch, np_stream(2, "roll"))
    assert np.isfinite(log_probs).all()
    assert (log_probs <= 0).all()
    assert np.isfinite(values).all()


def test_non_finite_logits_raise_numerical_fault():
    head = HeadOut(
        type_logits=Tensor(np.array([np.nan, 0.0])),
        node_logits=Tensor(np.zeros(3)),
        value=Tensor(np.asarray(0.0)),
    )
    with pytest.raises(NumericalFault):
        sample_action(head, np_stream(0, "nan"))


def test_evaluate_reproduces_sampled_log_probs_exactly():
    policy = EntityPolicy(TINY, seed=14)
    batch = [random_obs(4 + (i % 3), i) for i in range(12)]
    actions, log_probs, values = policy.sample_batch(batch, np_stream(3, "roll"))
    log_probs2, values2, _ = policy.evaluate_batch(batch, actions)
    assert np.array_equal(log_probs2.data.astype(np.float64), log_probs)
    assert np.array_equal(values2.data.astype(np.float64), values)


def test_per_instance_rng_sampling_is_order_independent():
    policy = EntityPolicy(TINY, seed=15)
    batch = [random_obs(5, i) for i in range(6)]
    rngs = lambda: [np_stream(4, "ep", i) for i in range(6)]
    a1, lp1, _ = policy.sample_batch(batch, rngs())
    order = [5, 3, 0, 1, 4, 2]
    shuffled = [batch[i] for i in order]
    a2, lp2, _ = policy.sample_batch(shuffled, [np_stream(4, "ep", i) for i in order])
    assert [a2[order.index(i)] for i in range(6)] == list(a1)
    assert np.allclose([lp2[order.index(i)] for i in range(6)], lp1)


# --- evaluation --------------------------------------------------------------------


def test_uniform_heads_entropy():
    policy = EntityPolicy(TINY, seed=16)
    policy.params["type_head.w"].data[:] = 0.0
    policy.params["type_head.b"].data[:] = 0.0
    policy.params["select.wq"].data[:] = 0.0
    batch = [random_obs(10, 1)]
    _, _, entropy = policy.evaluate_batch(batch, [CompositeAction(0, 0)])
    assert entropy.data[0] == pytest.approx(np.log(2) + np.log(10), rel=1e-5)


def test_evaluate_rejects_invalid_actions():
    policy = EntityPolicy(TINY, seed=17)
    batch = [random_obs(5, 1)]
    with pytest.raises(ValueError):
        policy.evaluate_batch(batch, [CompositeAction(0, 5)])
    with pytest.raises(ValueError):
        policy.evaluate_batch(batch, [CompositeAction(3, 0)])
    with pytest.raises(ValueError):
        policy.evaluate_batch(batch, [])


def test_evaluate_actions_is_differentiable():
    params = pol.init_entity_params(TINY64, seed=18)
    batch = [random_obs(3, 1), random_obs(4, 2)]
    actions = [CompositeAction(0, 1), CompositeAction(1, 3)]
    log_probs, values, entropy = evaluate_actions(batch, actions, params, TINY64)
    loss = log_probs.sum() + values.sum() + entropy.sum()
    loss.backward()
    touched = [p for p in params.values() if p.grad is not None]
    assert len(touched) == len(params)


def test_entity_gradients_match_finite_differences():
    params = pol.init_entity_params(TINY64, seed=19)
    batch = [random_obs(3, 5)]
    actions = [CompositeAction(1, 2)]

    def loss():
        lp, v, ent = evaluate_actions(batch, actions, params, TINY64)
        return (lp + 0.5 * v * v - 0.01 * ent).sum()

    wrt = list(params.values())
    ad.zero_grads(wrt)
    loss().backward()
    numeric = ad.finite_difference(loss, wrt, h=1e-5)
    for p, n in zip(wrt, numeric):
        scale = np.maximum(np.abs(p.grad), np.abs(n))
        err = np.abs(p.grad - n) / np.where(scale > 1e-8, scale, 1.0)
        assert err.max() <= 1e-5, p.name


# --- mlp ---------------------------------------------------------------------------


def test_mlp_zero_weights_give_uniform_policy_and_zero_value():
    config = MlpPolicyConfig(node_count=10)
    policy = MlpPolicy(config, seed=20)
    for p in policy.parameters():
        p.data[:] = 0.0
    logits, value = mlp_forward(random_obs(10, 1), policy.params, config)
    assert logits.shape == (20,)
    assert np.allclose(logits.data, 0.0)
    assert float(value.data) == 0.0
    actions, log_probs, values = policy.sample_batch(
        [random_obs(10, 2)], np_stream(5, "mlp")
    )
    assert log_probs[0] == pytest.approx(np.log(1 / 20))


def test_mlp_rejects_other_sizes():
    policy = MlpPolicy(MlpPolicyConfig(node_count=10), seed=21)
    with pytest.raises(ValueError):
        policy.sample_batch([random_obs(20, 1)], np_stream(6, "mlp"))
    assert policy.supports_node_count(10)
    assert not policy.supports_node_count(20)


def test_mlp_flat_action_is_type_major():
    config = MlpPolicyConfig(node_count=7)
    policy = MlpPolicy(config, seed=22)
    assert policy._composite(0) == CompositeAction(0, 0)
    assert policy._composite(8) == CompositeAction(1, 1)


def test_mlp_evaluate_matches_sampled_log_probs():
    policy = MlpPolicy(MlpPolicyConfig(node_count=6), seed=23)
    batch = [random_obs(6, i) for i in range(5)]
    actions, log_probs, values = policy.sample_batch(batch, np_stream(7, "mlp"))
    log_probs2, values2, entropy = policy.evaluate_batch(batch, actions)
    assert np.array_equal(log_probs2.data.astype(np.float64), log_probs)
    assert (entropy.data > 0).all()


def test_mlp_saturated_head_entropy_approaches_zero():
    config = MlpPolicyConfig(node_count=4)
    policy = MlpPolicy(config, seed=24)
    policy.params["policy.w3"].data[:] = 0.0
    policy.params["policy.b3"].data[:] = -60.0
    policy.params["policy.b3"].data[2] = 60.0
    _, _, entropy = policy.evaluate_batch([random_obs(4, 1)], [CompositeAction(0, 2)])
    assert entropy.data[0] == pytest.approx(0.0, abs=1e-6)


def test_mlp_gradients_match_finite_differences():
    config = MlpPolicyConfig(node_count=3, hidden_width=8, dtype="float64")
    policy = MlpPolicy(config, seed=25)
    batch = [random_obs(3, 1), random_obs(3, 2)]
    actions = [CompositeAction(0, 2), CompositeAction(1, 0)]

    def loss():
        lp, v, ent = policy.evaluate_batch(batch, actions)
        return (lp + 0.5 * v * v - 0.01 * ent).sum()

    wrt = policy.parameters()
    ad.zero_grads(wrt)
    loss().backward()
    numeric = ad.finite_difference(loss, wrt, h=1e-5)
    for p, n in zip(wrt, numeric):
        scale = np.maximum(np.abs(p.grad), np.abs(n))
        err = np.abs(p.grad - n) / np.where(scale > 1e-8, scale, 1.0)
        assert err.max() <= 1e-5, p.name


# --- persistence --------------------------------------------------------------------


def test_entity_checkpoint_round_trip(tmp_path):
    policy = EntityPolicy(TINY, seed=26)
    path = tmp_path / "entity.ckpt"
    policy.save(path, extra_meta={"env_steps": 1234})
    loaded = load_policy(path)
    assert isinstance(loaded, EntityPolicy)
    assert loaded.config == policy.config
    for name, p in policy.params.items():
        assert np.array_equal(loaded.params[name].data, p.data)
    batch = [random_obs(5, 1)]
    a, lp, v = policy.sample_batch(batch, np_stream(9, "ck"))
    a2, lp2, v2 = loaded.sample_batch(batch, np_stream(9, "ck"))
    assert a == a2 and np.array_equal(lp, lp2) and np.array_equal(v, v2)


def test_mlp_checkpoint_round_trip(tmp_path):
    policy = MlpPolicy(MlpPolicyConfig(node_count=5), seed=27)
    path = tmp_path / "mlp.ckpt"
    policy.save(path)
    loaded = load_policy(path)
    assert isinstance(loaded, MlpPolicy)
    assert loaded.config == policy.config
    assert loaded.node_count == 5


def test_initialisation_is_seed_deterministic():
    a = EntityPolicy(TINY, seed=3)
    b = EntityPolicy(TINY, seed=3)
    c = EntityPolicy(TINY, seed=4)
    assert all(
        np.array_equal(a.params[n].data, b.params[n].data) for n in a.params
    )
    assert any(
        not np.array_equal(a.params[n].data, c.params[n].data) for n in a.params
    )
