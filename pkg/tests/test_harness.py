import csv
import json
import math

import numpy as np
import pytest

from netdef import UnsupportedEvaluation
from netdef.config import RunConfig
from netdef.game import GameConfig
from netdef.harness import (
    EvalReport,
    ExperimentMatrix,
    _cell_config,
    cross_size_matrix,
    emit_plots,
    evaluate,
    read_rewards_csv,
    run_matrix,
    run_name,
    summarize,
    uniform_random_baseline,
    write_rewards_csv,
)
from netdef.policy import EntityPolicy, EntityPolicyConfig, MlpPolicy, MlpPolicyConfig
from netdef.ppo import DEFAULT_LEARNING_RATES

TINY_POLICY = EntityPolicyConfig(d_model=8, n_heads=1, n_layers=1, d_ff=8, d_qk=8)
SHORT_GAME = GameConfig(episode_length=10)


@pytest.fixture(scope="module")
def entity_policy():
    return EntityPolicy(TINY_POLICY, seed=0)


@pytest.fixture(scope="module")
def mlp_policy():
    return MlpPolicy(MlpPolicyConfig(node_count=5, hidden_width=8), seed=0)


# --- summarize ------------------------------------------------------------------------


def test_summarize_hand_values():
    s = summarize([1.0, 2.0, 3.0, 4.0])
    assert s["mean"] == 2.5
    assert s["std"] == pytest.approx(math.sqrt(5.0 / 3.0), rel=1e-12)
    assert s["std"] == pytest.approx(1.2910, abs=1e-4)
    assert s["min"] == 1.0 and s["max"] == 4.0
    assert s["25%"] == 1.75 and s["50%"] == 2.5 and s["75%"] == 3.25


def test_summarize_constant_vector():
    s = summarize([5.0, 5.0, 5.0])
    assert s == {"mean": 5.0, "std": 0.0, "min": 5.0, "25%": 5.0, "50%": 5.0, "75%": 5.0, "max": 5.0}


def test_summarize_rejects_empty():
    with pytest.raises(ValueError):
        summarize([])


def test_summarize_single_episode_has_zero_std():
    assert summarize([7.0])["std"] == 0.0


def test_report_summary_recomputable():
    rng = np.random.default_rng(0)
    report = EvalReport.from_rewards(rng.random(50) * 100)
    assert summarize(report.rewards) == report.summary


# --- evaluate -------------------------------------------------------------------------


def test_evaluate_is_deterministic(entity_policy):
    a = evaluate(entity_policy, 5, episodes=6, seed=3, game=SHORT_GAME)
    b = evaluate(entity_policy, 5, episodes=6, seed=3, game=SHORT_GAME)
    assert np.array_equal(a.rewards, b.rewards)
    assert a.summary == b.summary


def test_evaluate_independent_of_batch_size(entity_policy):
    a = evaluate(entity_policy, 5, episodes=7, seed=4, game=SHORT_GAME, batch_size=2)
    b = evaluate(entity_policy, 5, episodes=7, seed=4, game=SHORT_GAME, batch_size=64)
    assert np.array_equal(a.rewards, b.rewards)


def test_evaluate_rewards_bounded_by_length(entity_policy):
    report = evaluate(entity_policy, 6, episodes=5, seed=0, game=SHORT_GAME)
    assert report.rewards.shape == (5,)
    assert np.all(report.rewards >= 0.0)
    assert np.all(report.rewards <= SHORT_GAME.episode_length)


def test_entity_evaluates_on_any_size(entity_policy):
    for nodes in (4, 9):
        report = evaluate(entity_policy, nodes, episodes=2, seed=1, game=SHORT_GAME)
        assert len(report.rewards) == 2


def test_mlp_refuses_other_sizes(mlp_policy):
    report = evaluate(mlp_policy, 5, episodes=2, seed=1, game=SHORT_GAME)
    assert len(report.rewards) == 2
    with pytest.raises(UnsupportedEvaluation):
        evaluate(mlp_policy, 6, episodes=2, seed=1, game=SHORT_GAME)


def test_evaluate_from_checkpoint_path(tmp_path, entity_policy):
    path = tmp_path / "p.ckpt"
    entity_policy.save(path)
    a = evaluate(path, 5, episodes=3, seed=9, game=SHORT_GAME)
    b = evaluate(entity_policy, 5, episodes=3, seed=9, game=SHORT_GAME)
    assert np.array_equal(a.rewards, b.rewards)


def test_evaluate_rejects_zero_episodes(entity_policy):
    with pytest.raises(ValueError):
        evaluate(entity_policy, 5, episodes=0, seed=0)


def test_uniform_random_baseline_bounds():
    report = uniform_random_baseline(5, episodes=10, seed=2, game=SHORT_GAME)
    again = uniform_random_baseline(5, episodes=10, seed=2, game=SHORT_GAME)
    assert np.array_equal(report.rewards, again.rewards)
    assert np.all((report.rewards >= 0) & (report.rewards <= SHORT_GAME.episode_length))


# --- rewards csv ------------------------------------------------------------------------


def test_rewards_csv_round_trip(tmp_path):
    rewards = np.random.default_rng(1).random(20) * 100
    path = tmp_path / "r.csv"
    write_rewards_csv(path, rewards)
    assert np.array_equal(read_rewards_csv(path), rewards)


# --- experiment matrix -------------------------------------------------------------------


def test_matrix_validation():
    with pytest.raises(ValueError):
        ExperimentMatrix(policies=())
    with pytest.raises(ValueError):
        ExperimentMatrix(policies=("transformer",))
    with pytest.raises(ValueError):
        ExperimentMatrix(regimes=("adversarial",))
    with pytest.raises(ValueError):
        ExperimentMatrix(sizes=(0,))


def test_matrix_cell_count():
    matrix = ExperimentMatrix()
    assert len(matrix) == 2 * 2 * 3 * 3 == 36
    assert len(list(matrix.cells())) == 36
    small = ExperimentMatrix(policies=("entity",), regimes=("random",), sizes=(10,), seeds=(0,))
    assert list(small.cells()) == [("entity", "random", 10, 0)]


def test_run_name_format():
    assert run_name("entity", "random", 10, 2) == "entity_random_10_seed2"


def test_cell_config_learning_rate_follows_family():
    base = RunConfig.from_dict({"policy": "entity"})
    cell = _cell_config(base, "mlp", "static", 10, 1)
    assert cell.ppo.learning_rate == DEFAULT_LEARNING_RATES["mlp"]
    assert cell.policy == "mlp" and cell.mode == "static" and cell.seed == 1

    pinned = RunConfig.from_dict({"policy": "entity", "ppo": {"learning_rate": 0.042}})
    assert _cell_config(pinned, "mlp", "static", 10, 1).ppo.learning_rate == 0.042


# --- run_matrix ---------------------------------------------------------------------------


def tiny_base_config() -> RunConfig:
    return RunConfig.from_dict(
        {
            "game": {"episode_length": 10},
            "ppo": {
                "total_steps": 64,
                "num_envs": 2,
                "rollout_len": 8,
                "epochs": 1,
                "minibatches": 2,
                "eval_interval": 32,
                "eval_episodes": 1,
            },
            "entity": TINY_POLICY.to_dict(),
            "mlp_hidden": 8,
        }
    )


def test_run_matrix_trains_each_cell(tmp_path):
    matrix = ExperimentMatrix(policies=("entity",), regimes=("random",), sizes=(4,), seeds=(0, 1))
    results = run_matrix(matrix, tiny_base_config(), tmp_path)
    assert set(results) == {"entity_random_4_seed0", "entity_random_4_seed1"}
    for name, info in results.items():
        assert info["status"] == "ok"
        assert (tmp_path / name / "log.csv").exists()
        assert (tmp_path / name / "config.json").exists()
        assert (tmp_path / name / "final.ckpt").exists()
    assert json.loads((tmp_path / "matrix.json").read_text()) == results


def test_ensure_runs_reuses_fresh_artifacts(tmp_path):
    from netdef.harness import ensure_runs

    runs = [("entity_random_4_seed0", _cell_config(tiny_base_config(), "entity", "random", 4, 0))]
    dirs = ensure_runs(runs, tmp_path)
    log = dirs["entity_random_4_seed0"] / "log.csv"
    stamp = log.stat().st_mtime_ns
    assert ensure_runs(runs, tmp_path) == dirs
    assert log.stat().st_mtime_ns == stamp  # cache hit: nothing retrained

    stale = [("entity_random_4_seed0", _cell_config(tiny_base_config(), "entity", "random", 4, 1))]
    ensure_runs(stale, tmp_path)
    assert log.stat().st_mtime_ns != stamp  # config changed: retrained


def test_desk_scale_protocol_shape():
    from netdef.harness import desk_scale_runs

    runs = desk_scale_runs(total_steps=1000)
    names = [name for name, _ in runs]
    assert len(runs) == 14
    assert len(set(names)) == 14
    assert "entity_random_10_seed2" in names
    assert "mlp_static_10_seed1" in names
    assert "entity_random_40_seed0" in names
    assert all(cfg.ppo.total_steps == 1000 for _, cfg in runs)
    by_name = dict(runs)
    assert by_name["mlp_random_10_seed0"].ppo.learning_rate == DEFAULT_LEARNING_RATES["mlp"]
    assert by_name["entity_random_20_seed0"].nodes == 20


def test_final_eval_mean(tmp_path):
    from netdef.harness import final_eval_mean

    log = tmp_path / "log.csv"
    rows = ["env_steps,episodic_reward"] + [f"{i},{float(i)}" for i in range(30)]
    log.write_text("\n".join(rows) + "\n")
    assert final_eval_mean(log, points=20) == np.mean(np.arange(10, 30))
    with pytest.raises(ValueError):
        final_eval_mean(log, points=40)


def _fake_run(tmp_path, rewards_by_step, ckpt_steps, with_final=True):
    run = tmp_path / "run"
    run.mkdir()
    rows = ["env_steps,episodic_reward"] + [
        f"{step},{reward}" for step, reward in rewards_by_step
    ]
    (run / "log.csv").write_text("\n".join(rows) + "\n")
    for step in ckpt_steps:
        (run / f"checkpoint_{step:09d}.ckpt").write_bytes(b"")
    if with_final:
        (run / "final.ckpt").write_bytes(b"")
    return run


def test_best_checkpoint_skips_degraded_tail(tmp_path):
    from netdef.harness import best_checkpoint

    # plateau at 90 until step 80, collapse to 5 afterwards
    rows = [(s, 90.0 if s <= 80 else 5.0) for s in range(10, 130, 10)]
    run = _fake_run(tmp_path, rows, ckpt_steps=[60])
    assert best_checkpoint(run).name == "checkpoint_000000060.ckpt"


def test_best_checkpoint_near_tie_takes_latest(tmp_path):
    from netdef.harness import best_checkpoint

    # eval noise within the tolerance band must not drag selection backwards
    rows = [(s, 90.0 + 0.4 * (-1) ** (s // 10)) for s in range(10, 130, 10)]
    run = _fake_run(tmp_path, rows, ckpt_steps=[60])
    assert best_checkpoint(run).name == "final.ckpt"


def test_best_checkpoint_without_periodic_uses_final(tmp_path):
    from netdef.harness import best_checkpoint

    run = _fake_run(tmp_path, [(10, 50.0)], ckpt_steps=[])
    assert best_checkpoint(run).name == "final.ckpt"


def test_best_checkpoint_missing_artifacts(tmp_path):
    from netdef.harness import best_checkpoint

    run = _fake_run(tmp_path, [(10, 50.0)], ckpt_steps=[], with_final=False)
    with pytest.raises(FileNotFoundError):
        best_checkpoint(run)
    with pytest.raises(FileNotFoundError):
        best_checkpoint(tmp_path / "absent")


def test_run_matrix_survives_failures(tmp_path):
    base = tiny_base_config()
    bad = RunConfig.from_dict(
        {**base.to_dict(), "ppo": {**base.ppo.to_dict(), "learning_rate": 1e12}}
    )
    matrix = ExperimentMatrix(policies=("entity",), regimes=("random",), sizes=(4,), seeds=(0, 1))
    with np.errstate(over="ignore", invalid="ignore"):
        results = run_matrix(matrix, bad, tmp_path)
    assert all(info["status"] == "failed" for info in results.values())
    assert all("NumericalFault" in info["error"] for info in results.values())
    assert len(results) == 2


# --- cross-size matrix ----------------------------------------------------------------------


def test_cross_size_matrix_grid_and_files(tmp_path, entity_policy):
    grid = cross_size_matrix(
        {4: entity_policy, 6: entity_policy},
        eval_sizes=(4, 6),
        episodes=3,
        seed=5,
        out_dir=tmp_path,
        game=SHORT_GAME,
    )
    assert set(grid) == {(4, 4), (4, 6), (6, 4), (6, 6)}
    for (t, e), report in grid.items():
        stored = read_rewards_csv(tmp_path / f"eval_rand_{t}_on_{e}.csv")
        assert np.array_equal(stored, report.rewards)
        assert summarize(stored) == report.summary
    with open(tmp_path / "cross_size_summary.csv", newline="") as fh:
        rows = {row["name"]: row for row in csv.DictReader(fh)}
    assert set(rows) == {"eval_rand_4_on_4", "eval_rand_4_on_6", "eval_rand_6_on_4", "eval_rand_6_on_6"}
    assert float(rows["eval_rand_4_on_6"]["mean"]) == grid[(4, 6)].summary["mean"]


def test_cross_size_matrix_refuses_mlp(mlp_policy):
    with pytest.raises(UnsupportedEvaluation):
        cross_size_matrix({5: mlp_policy}, (5,), episodes=2, seed=0, game=SHORT_GAME)


# --- plots -------------------------------------------------------------------------------------


def test_emit_plots_from_matrix_artifacts(tmp_path, entity_policy):
    runs = tmp_path / "runs"
    matrix = ExperimentMatrix(policies=("entity",), regimes=("random",), sizes=(4,), seeds=(0, 1))
    run_matrix(matrix, tiny_base_config(), runs)
    cross_size_matrix(
        {4: entity_policy}, (4, 6), episodes=3, seed=1, out_dir=runs / "xeval", game=SHORT_GAME
    )
    written, missing = emit_plots(runs, tmp_path / "plots")
    names = {p.name for p in written}
    assert {"training_curves_4n.svg", "training_curves_4n.png"} <= names
    assert {"boxplot_eval_4n.svg", "boxplot_eval_6n.png"} <= names
    assert all(p.exists() and p.stat().st_size > 0 for p in written)
    # only entity_random trained: the other three traces are reported missing
    assert any("mlp_static" in m for m in missing)


def test_emit_plots_empty_dir_lists_missing(tmp_path):
    (tmp_path / "runs").mkdir()
    written, missing = emit_plots(tmp_path / "runs", tmp_path / "plots")
    assert written == []
    assert len(missing) == 2
