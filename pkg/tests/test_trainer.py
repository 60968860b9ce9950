import json
import math
from dataclasses import replace

import numpy as np
import pytest

from gdpl.dialog import DialogEnv
from gdpl.policy import PolicyNet
from gdpl.trainer import (
    ALGOS, REPORT_COLUMNS, ConfigError, TrainConfig, Trainer, collect_rollouts, run_experiment, run_policy,
)

SMALL = dict(episodes_per_iteration=4, hidden_dim=16, eval_episodes=20, imitation_epochs=1, batch_size=16)


def small(**kw):
    return TrainConfig(**{**SMALL, **kw})


def same_report(a, b):
    return all((math.isnan(a[k]) and math.isnan(b[k])) or a[k] == b[k] for k in REPORT_COLUMNS)


def test_zero_episodes_gives_empty_buffer(world):
    env = DialogEnv(world)
    pol = PolicyNet(env.state_dim, len(world.ontology), hidden=(8,))
    r = collect_rollouts(pol, env, 0, np.random.default_rng(0))
    assert len(r) == 0 and r.sessions == [] and r.states.shape == (0, env.state_dim)


def test_frozen_policy_same_seed_same_sessions(world):
    env = DialogEnv(world)
    pol = PolicyNet(env.state_dim, len(world.ontology), hidden=(8,), rng=np.random.default_rng(0))
    a = collect_rollouts(pol, env, 5, np.random.default_rng(3))
    b = collect_rollouts(pol, env, 5, np.random.default_rng(3))
    assert np.array_equal(a.states, b.states) and np.array_equal(a.actions, b.actions)
    assert [t.system_action for s in a.sessions for t in s.turns] == \
           [t.system_action for s in b.sessions for t in s.turns]


def test_rollout_lengths_capped(world):
    env = DialogEnv(world)
    pol = PolicyNet(env.state_dim, len(world.ontology), hidden=(8,), rng=np.random.default_rng(0))
    r = collect_rollouts(pol, env, 20, np.random.default_rng(1))
    assert all(1 <= len(s) <= 40 for s in r.sessions)
    assert np.allclose(r.log_prob_old, pol.log_prob(r.states, r.actions), rtol=0, atol=1e-12)
    assert r.terminals.sum() == 20


def test_run_policy_same_users_for_any_policy(world):
    env = DialogEnv(world)
    p1 = PolicyNet(env.state_dim, len(world.ontology), hidden=(8,), rng=np.random.default_rng(0))
    p2 = PolicyNet(env.state_dim, len(world.ontology), hidden=(8,), rng=np.random.default_rng(1))
    g1 = [s.goal for s in run_policy(p1, env, 10, 5)]
    g2 = [s.goal for s in run_policy(p2, env, 10, 5, greedy=True)]
    assert g1 == g2


def test_config_rejects_unknown_keys_and_bad_values(tmp_path):
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"algo": "gdpl", "learning_rate": 1})
    with pytest.raises(ConfigError):
        TrainConfig(algo="dqn").validate()
    with pytest.raises(ConfigError):
        TrainConfig(gamma=1.5).validate()
    with pytest.raises(ConfigError):
        TrainConfig(ontology=str(tmp_path / "none.json")).validate()
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"algo": "aldm", "seed": 3}))
    cfg = TrainConfig.load(path)
    assert (cfg.algo, cfg.seed, cfg.iterations) == ("aldm", 3, 200)


@pytest.mark.parametrize("algo", ALGOS)
def test_every_variant_runs_from_one_config(world, corpus, algo):
    tr = Trainer(small(algo=algo), world, corpus)
    tr.pretrain()
    rep = tr.train_iteration()
    assert rep["aborted"] == 0 and math.isfinite(rep["policy_loss"])
    assert math.isnan(rep["j_f"]) == (algo == "ppo-handcrafted")


def test_handcrafted_variant_skips_estimator(world, corpus):
    tr = Trainer(small(algo="ppo-handcrafted"), world, corpus)
    before = tr.estimator.params.copy()
    tr.train_iteration()
    assert np.array_equal(before, tr.estimator.params)


def test_identical_seeds_identical_reports(world, corpus):
    runs = []
    for _ in range(2):
        tr = Trainer(small(seed=4), world, corpus)
        tr.pretrain()
        runs.append([tr.train_iteration() for _ in range(3)])
    assert all(same_report(a, b) for a, b in zip(*runs))


class Recording(Trainer):
    def _rewards(self, rollout):
        self.seen = (self.policy.old_params.copy(), self.policy.net.params.copy(), self.estimator.params.copy())
        return super()._rewards(rollout)


def test_iteration_order(world, corpus):
    tr = Recording(small(), world, corpus)
    tr.pretrain()
    theta0, omega0 = tr.policy.net.params.copy(), tr.estimator.params.copy()
    tr.train_iteration()
    old, theta_at_reward, omega_at_reward = tr.seen
    assert np.array_equal(old, theta0) and np.array_equal(theta_at_reward, theta0)
    assert not np.array_equal(omega_at_reward, omega0)
    assert np.array_equal(omega_at_reward, tr.estimator.params)
    assert not np.array_equal(tr.policy.net.params, theta0)


def test_reward_offset_is_demonstration_mean_of_f(world, corpus):
    tr = Trainer(small(), world, corpus)
    tr.pretrain()
    tr.train_iteration()
    off = tr.reward_offset()
    assert np.mean(tr.estimator.f(tr.sampler.pairs) - off) == pytest.approx(0.0, abs=1e-9)
    tr.config = replace(tr.config, center_reward=False)
    assert tr.reward_offset() == 0.0


@pytest.mark.parametrize("algo", ["gdpl", "gdpl-discr"])
def test_centering_shifts_pair_rewards_by_offset(world, corpus, algo):
    tr = Trainer(small(algo=algo), world, corpus)
    tr.pretrain()
    tr.train_iteration()
    rollout = collect_rollouts(tr.policy, tr.env, 3, np.random.default_rng(0))
    centered = tr._rewards(rollout)
    tr.config = replace(tr.config, center_reward=False)
    raw = tr._rewards(rollout)
    assert np.allclose(raw - centered, tr.estimator.f(tr.sampler.pairs).mean(), rtol=0, atol=1e-9)


def test_advantages_normalized_per_batch(world, corpus, monkeypatch):
    import gdpl.trainer as trainer_mod
    seen = []
    real = trainer_mod.ppo_policy_loss

    def spy(policy, s, a, old, adv, eps):
        seen.append(np.array(adv))
        return real(policy, s, a, old, adv, eps)

    monkeypatch.setattr(trainer_mod, "ppo_policy_loss", spy)
    tr = Trainer(small(ppo_epochs=1), world, corpus)
    tr.pretrain()
    tr.train_iteration()
    adv = np.concatenate(seen)
    assert adv.mean() == pytest.approx(0.0, abs=1e-9) and adv.std() == pytest.approx(1.0, abs=1e-9)


def test_non_finite_iteration_is_rolled_back(world, corpus):
    tr = Trainer(small(), world, corpus)
    tr.pretrain()
    tr.estimator.g.params[0] = np.nan
    saved = (tr.policy.net.params.copy(), tr.value.net.params.copy())
    rep = tr.train_iteration()
    assert rep["aborted"] == 1
    assert np.array_equal(saved[0], tr.policy.net.params) and np.array_equal(saved[1], tr.value.net.params)


def test_zero_iterations_equals_pretrained_evaluation(world, corpus, tmp_path):
    res = run_experiment(small(iterations=0), tmp_path / "run", world, corpus)
    tr = Trainer(small(iterations=0), world, corpus)
    tr.pretrain()
    _, outcomes = tr.evaluate()
    assert [o.success for o in outcomes] == [o.success for o in res["outcomes"]]
    assert [o.turns for o in outcomes] == [o.turns for o in res["outcomes"]]
    assert (tmp_path / "run" / "metrics.tsv").read_text() == "\t".join(REPORT_COLUMNS) + "\n"


def test_resume_matches_uninterrupted_run(world, corpus, tmp_path):
    straight = Trainer(small(seed=2), world, corpus)
    straight.pretrain()
    full = [straight.train_iteration() for _ in range(4)]
    first = Trainer(small(seed=2), world, corpus)
    first.pretrain()
    for _ in range(2):
        first.train_iteration()
    first.save(tmp_path / "ck")
    resumed = Trainer.load(tmp_path / "ck", world, corpus)
    rest = [resumed.train_iteration() for _ in range(2)]
    assert all(same_report(a, b) for a, b in zip(full[2:], rest))
    assert np.array_equal(straight.policy.net.params, resumed.policy.net.params)


def test_checkpoint_bytes_are_reproducible(world, corpus, tmp_path):
    for name in ("a", "b"):
        tr = Trainer(small(seed=1), world, corpus)
        tr.pretrain()
        tr.train_iteration()
        tr.save(tmp_path / name)
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_missing_checkpoint(world, tmp_path):
    with pytest.raises(FileNotFoundError):
        Trainer.load(tmp_path / "nothing", world)


def test_experiment_outputs(world, corpus, tmp_path):
    res = run_experiment(small(iterations=2), tmp_path / "run", world, corpus)
    rows = (tmp_path / "run" / "metrics.tsv").read_text().splitlines()
    assert len(rows) == 3 and rows[0].split("\t") == list(REPORT_COLUMNS)
    summary = json.loads((tmp_path / "run" / "eval.json").read_text())
    assert summary["sessions"] == 20 and set(summary["returns"]) == {"inform", "match", "success"}
    assert res["summary"]["kl_turns"] >= 0
