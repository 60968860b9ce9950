"""Acceptance criteria, each printing one PASS/FAIL line.

The directional comparison trains 5 seeds of 4 variants for 300 iterations
and takes roughly 20 minutes on one core.  Its per-seed numbers are written
to results/acceptance_grid.json.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest

from gdpl import evaluate
from gdpl.cli import main, pick_trace_session
from gdpl.corpus import play_expert, session_rng
from gdpl.experiments import VARIANTS, grid_table, mean_over_seeds, pooled_returns, run_grid, thirds, write_grid
from gdpl.nn import Mlp
from gdpl.ontology import default_world
from gdpl.policy import PolicyNet, ValueNet, clipped_objective, gae, imitation_loss, ppo_policy_loss, value_loss
from gdpl.reward import RewardEstimator, discriminator_mode_loss, estimator_loss
from gdpl.simulator import SimulatorConfig
from gdpl.trainer import TrainConfig

from test_evaluate import grid_cases, oracle, transcript
from test_policy import brute_gae, numeric_grad, two_branch
from test_reward import random_batch, random_estimator
from test_reward import numeric_grad as estimator_numeric_grad

RESULTS = Path(__file__).resolve().parent.parent / "results"
SEEDS = range(5)
ITERATIONS = 300


@pytest.fixture
def verdict(capsys):
    def emit(number, name, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, f"criterion {number} ({name}) failed: {detail}"
    return emit


def test_criterion_1_numeric_oracles(verdict):
    t0 = time.time()
    rng = np.random.default_rng(0)
    problems = []

    for _ in range(300):
        T = int(rng.integers(1, 12))
        r, v = rng.normal(size=T), rng.normal(size=T + 1)
        term = rng.random(T) < 0.3
        term[-1] = True
        gamma, lam = rng.random(), rng.random()
        adv, ret = gae(r, v, gamma, lam, term)
        badv, bret = brute_gae(r, v, gamma, lam, term)
        if np.max(np.abs(adv - badv)) > 1e-9 or np.max(np.abs(ret - bret)) > 1e-9:
            problems.append("gae")

    for _ in range(2000):
        beta, adv, eps = rng.uniform(0.01, 5), rng.uniform(-10, 10), rng.uniform(0.01, 0.9)
        if clipped_objective(np.array([beta]), np.array([adv]), eps)[0][0] != two_branch(beta, adv, eps):
            problems.append("clip")

    est = random_estimator(rng)
    b = random_batch(rng, 50)
    g = est.g.forward(np.hstack([b.states, b.actions]))[:, 0]
    recomposed = g + est.gamma * est.h.forward(b.next_states)[:, 0] * (1 - b.terminals) - est.h.forward(b.states)[:, 0]
    if np.max(np.abs(est.f(b) - recomposed)) > 1e-12:
        problems.append("recomposition")

    def close(analytic, numeric):
        return np.allclose(analytic, numeric, rtol=1e-4, atol=1e-8)

    def off_kinks(params):
        # zero biases can leave pre-activations exactly on the ReLU kink
        params += rng.normal(size=params.shape) * 0.05

    net = Mlp((4, 6, 5, 3), rng=rng)
    off_kinks(net.params)
    x, dy = rng.normal(size=(5, 4)), rng.normal(size=(5, 3))
    net.forward(x)
    if not close(net.backward(dy), numeric_grad(lambda: float(np.sum(dy * net.forward(x))), net.params)):
        problems.append("mlp")
    pol = PolicyNet(4, 5, hidden=(6, 6), rng=rng)
    off_kinks(pol.net.params)
    s, a = rng.normal(size=(7, 4)), (rng.random((7, 5)) < 0.5).astype(float)
    adv = rng.normal(size=7)
    old = pol.log_prob(s, a) + rng.normal(size=7) * 0.05
    if not close(ppo_policy_loss(pol, s, a, old, adv, 0.2)[1],
                 numeric_grad(lambda: ppo_policy_loss(pol, s, a, old, adv, 0.2)[0], pol.net.params)):
        problems.append("ppo")
    if not close(imitation_loss(pol, s, a)[1], numeric_grad(lambda: imitation_loss(pol, s, a)[0], pol.net.params)):
        problems.append("imitation")
    val = ValueNet(4, hidden=(6, 6), rng=rng)
    off_kinks(val.net.params)
    t = rng.normal(size=7)
    if not close(value_loss(val, s, t)[1], numeric_grad(lambda: value_loss(val, s, t)[0], val.net.params)):
        problems.append("value")
    est = random_estimator(rng)
    x1, x2 = random_batch(rng, 6), random_batch(rng, 7)
    if not close(estimator_loss(est, x1, x2)[1],
                 estimator_numeric_grad(lambda: -estimator_loss(est, x1, x2)[0], est)):
        problems.append("estimator")
    pol5 = PolicyNet(5, 4, hidden=(6,), rng=rng)
    off_kinks(pol5.net.params)
    if not close(discriminator_mode_loss(est, pol5, x1, x2)[1],
                 estimator_numeric_grad(lambda: discriminator_mode_loss(est, pol5, x1, x2)[0], est)):
        problems.append("discriminator")

    secs = time.time() - t0
    verdict(1, "numeric oracles", not problems and secs < 60,
            f"mismatches={sorted(set(problems)) or 'none'} runtime={secs:.1f}s")


def test_criterion_2_metric_oracle_suite(verdict, world):
    t0 = time.time()
    cases = grid_cases(world)
    bad = 0
    for goal, turns in cases:
        out = evaluate.session_outcome(transcript(goal, turns), world)
        bad += (out.precision, out.recall, out.f1, out.match, out.success) != oracle(goal, turns, world.db)
    # definitional cases: greedy informing, one failed booking domain, no requests, no bookings
    from test_evaluate import goal_with_requests, inform, book, matching
    from gdpl.ontology import DomainGoal, UserGoal
    g = goal_with_requests(world, "restaurant", ("address", "phone"))
    g.domains["hotel"] = DomainGoal({"area": world.db.tables["hotel"][0]["area"]})
    g.domains_order = ("restaurant", "hotel")
    acts = [inform(d, s) for d in ("restaurant", "hotel") for s in world.ontology.domain(d).requestable]
    p, r, _ = evaluate.inform_f1(transcript(g, [acts]), g, world.ontology)
    bad += (p, r) != (0.25, 1.0)
    h, rs = world.db.tables["hotel"][0], world.db.tables["restaurant"][0]
    g2 = UserGoal({"hotel": DomainGoal({"area": h["area"]}, (), {"people": "people0", "day": "day0", "stay": "stay0"}),
                   "restaurant": DomainGoal({"food": rs["food"]}, (), {"people": "people0", "day": "day0",
                                                                        "time": "time0"})},
                  ("hotel", "restaurant"))
    bad += evaluate.match_rate(transcript(g2, [[book("hotel", h["id"])]]), g2, world.db)[0] != 0.5
    only_book = UserGoal({"hotel": g2.domains["hotel"]}, ("hotel",))
    bad += evaluate.session_outcome(transcript(only_book, [[book("hotel", h["id"])]]), world).success != 1
    only_req = goal_with_requests(world, "taxi", ("phone",))
    bad += evaluate.session_outcome(transcript(only_req, [[inform("taxi", "phone")]]), world).success != 1
    secs = time.time() - t0
    verdict(2, "metric oracle suite", bad == 0 and len(cases) == 50 and secs < 60,
            f"{len(cases)} transcripts + 4 definitional cases, disagreements={bad}, runtime={secs:.1f}s")


def test_criterion_3_simulator_liveness(verdict):
    t0 = time.time()
    world = default_world(0)
    fails = over = 0
    worst = -99
    for i in range(1000):
        s = play_expert(world, SimulatorConfig(), 0.0, session_rng(2024, i))
        g = s.goal
        bound = g.n_constraints + g.n_requests + g.n_book + 2
        fails += not (s.satisfied and evaluate.session_outcome(s, world).success)
        over += len(s) > bound
        worst = max(worst, len(s) - bound)
    secs = time.time() - t0
    verdict(3, "simulator liveness", fails == 0 and over == 0 and secs < 60,
            f"1000 goals, failures={fails}, over bound={over}, max(turns-bound)={worst}, runtime={secs:.1f}s")


@pytest.fixture(scope="module")
def grid(tmp_path_factory):
    t0 = time.time()
    base = TrainConfig(iterations=ITERATIONS)
    runs = run_grid(base, VARIANTS, SEEDS, tmp_path_factory.mktemp("grid"))
    RESULTS.mkdir(exist_ok=True)
    write_grid(runs, RESULTS / "acceptance_grid.json")
    return runs, time.time() - t0


def test_criterion_4_directional_comparison(verdict, grid):
    runs, secs = grid
    succ = mean_over_seeds(runs, "success")
    gap = succ["gdpl"] - succ["ppo-handcrafted"]
    ok = gap >= 0.10 and succ["gdpl"] >= succ["gdpl-sess"] and succ["gdpl"] >= succ["gdpl-discr"]
    table = ", ".join(f"{a}={v:.3f}" for a, v in succ.items())
    verdict(4, "directional comparison", ok,
            f"5-seed mean success {table}; gdpl - ppo-handcrafted = {gap:+.3f} (need >= +0.100); "
            f"runtime={secs / 60:.1f}min")


def test_criterion_5_reward_interpretability(verdict, grid):
    runs, _ = grid
    pooled = pooled_returns(runs["gdpl"])
    ok = all(v["full_num"] > 0 and v["other_num"] > 0 and v["full_mean"] > v["other_mean"] for v in pooled.values())
    detail = "; ".join(f"{m}: full {v['full_mean']:.2f} (n={v['full_num']}) vs other {v['other_mean']:.2f} "
                       f"(n={v['other_num']})" for m, v in pooled.items())
    verdict(5, "reward interpretability", ok, detail)


def test_criterion_6_turn_kl(verdict, grid):
    runs, _ = grid
    kl = mean_over_seeds(runs, "kl_turns")
    verdict(6, "turn-distribution KL", kl["gdpl"] < kl["ppo-handcrafted"],
            f"5-seed mean KL gdpl={kl['gdpl']:.4f} ppo-handcrafted={kl['ppo-handcrafted']:.4f}")


def test_criterion_7_trace_shape(verdict, grid, tmp_path):
    runs, _ = grid
    shapes = []
    for seed, run in sorted(runs["gdpl"].items()):
        tr = run["trainer"]
        session = pick_trace_session(tr, seed=0, expert=True, min_domains=2)
        rhat = evaluate.trace_export(session, tr.estimator, tr.policy, tmp_path / f"trace{seed}.tsv",
                                     tr.world.ontology, tr.reward_offset())
        shapes.append((seed, len(rhat), *thirds(rhat)))
    seed0 = shapes[0]
    others = ", ".join(f"seed {s}: {a:.2f}->{b:.2f}" for s, _, a, b in shapes[1:])
    verdict(7, "trace shape", seed0[3] > seed0[2],
            f"seed 0 model, {seed0[1]}-turn expert session: first-third mean r_hat {seed0[2]:.3f}, "
            f"final-third {seed0[3]:.3f} (other seeds {others})")


def test_learning_happens_within_200_iterations(grid):
    runs, _ = grid
    first = np.mean([r["history"][0]["success"] for r in runs["gdpl"].values()])
    late = np.mean([np.mean([h["success"] for h in r["history"][180:200]]) for r in runs["gdpl"].values()])
    assert late > first


def test_grid_results_written(grid):
    doc = json.loads((RESULTS / "acceptance_grid.json").read_text())
    assert set(doc["mean"]) == set(VARIANTS)
    table = grid_table(grid[0])
    for algo in VARIANTS:
        assert doc["mean"][algo] == pytest.approx(table[algo])


def test_criterion_8_determinism(verdict, tmp_path):
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps({"episodes_per_iteration": 8, "hidden_dim": 32, "eval_episodes": 50,
                               "iterations": 3, "corpus_sessions": 200}))
    outputs = []
    for name in ("first", "second"):
        # same working path both times, since the checkpoint config records input paths
        d = tmp_path / "work"
        d.mkdir()
        codes = [
            main(["gen-ontology", "--seed", "0", "--out", str(d / "world.json")]),
            main(["gen-corpus", "--ontology", str(d / "world.json"), "--n", "200", "--seed", "1", "--workers", "1",
                  "--out", str(d / "corpus.jsonl")]),
            main(["train", "--config", str(cfg), "--ontology", str(d / "world.json"),
                  "--corpus", str(d / "corpus.jsonl"), "--algo", "gdpl", "--seed", "5", "--out", str(d / "run")]),
            main(["eval", "--checkpoint", str(d / "run" / "checkpoint"), "--n", "50", "--seed", "2",
                  "--out", str(d / "eval.tsv")]),
            main(["trace", "--checkpoint", str(d / "run" / "checkpoint"), "--expert", "--out", str(d / "trace.tsv")]),
        ]
        assert codes == [0] * 5
        outputs.append(d.rename(tmp_path / name))
    a, b = outputs
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    same = files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    differing = [str(f) for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    verdict(8, "determinism", same and not differing,
            f"{len(files)} files from gen-ontology/gen-corpus/train/eval/trace compared byte for byte, "
            f"differing={differing or 'none'}")
