"""Training loop: rollouts, reward-estimator update, reward labelling and PPO.

Random streams: the root seed feeds ``np.random.SeedSequence(seed)``, whose
spawned children are, in order, ``init`` (network weights), ``imitation``
(pretraining shuffles), ``human`` (demonstration sampling), ``rollout``
(goals, simulator and action sampling) and ``update`` (PPO minibatch order).
Evaluation goals use a separate per-episode stream keyed by the evaluation
seed, so every variant is scored on the same goals.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import evaluate
from .corpus import CorpusSampler, generate_corpus, read_corpus, session_rng
from .dialog import DialogEnv, session_transitions
from .nn import Adam, load_params, save_params
from .ontology import World, default_world, sample_goal
from .policy import PolicyNet, ValueNet, gae, imitation_pretrain, ppo_policy_loss, value_loss
from .reward import (
    DISCRIMINATOR, PAIRWISE, SESSION, EstimatorTrainer, RewardEstimator, Transitions,
    concat_transitions, discriminator_loss_from_logits, estimator_loss, handcrafted_reward,
    session_mode_reward,
)
from .simulator import SimulatorConfig

log = logging.getLogger(__name__)

ALGOS = ("gdpl", "ppo-handcrafted", "aldm", "gdpl-sess", "gdpl-discr")
STREAMS = ("init", "imitation", "human", "rollout", "update")
REPORT_COLUMNS = ("iteration", "j_f", "mean_reward", "policy_loss", "value_loss",
                  "success", "inform_f1", "match", "turns", "aborted")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    algo: str = "gdpl"
    seed: int = 0
    iterations: int = 200
    episodes_per_iteration: int = 32
    lr: float = 1e-4
    batch_size: int = 32
    gamma: float = 0.99
    clip_eps: float = 0.2
    gae_lambda: float = 0.95
    ppo_epochs: int = 4
    hidden_dim: int = 100
    grad_clip: float = 10.0
    estimator_lr: float = 1e-4
    estimator_weight_decay: float = 1e-5
    estimator_steps: int = 1
    estimator_epochs: int = 4
    center_reward: bool = True  # shift f so its mean over demonstration pairs is 0
    normalize_advantages: bool = True
    imitation_epochs: int = 5
    imitation_lr: float = 1e-4
    eval_episodes: int = 1000
    eval_seed: int | None = None
    eval_greedy: bool = False
    max_turns: int = 40
    p_fail: float = 0.3
    abandon_prob: float = 0.0
    inform_chunk: int = 2
    ontology: str | None = None
    ontology_seed: int = 0
    corpus: str | None = None
    corpus_sessions: int = 2000
    corpus_seed: int = 0
    expert_epsilon: float = 0.1
    checkpoint_every: int = 0

    def validate(self) -> "TrainConfig":
        if self.algo not in ALGOS:
            raise ConfigError(f"unknown algo {self.algo!r}; choose from {', '.join(ALGOS)}")
        for name in ("iterations", "imitation_epochs", "checkpoint_every", "estimator_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("episodes_per_iteration", "batch_size", "ppo_epochs", "hidden_dim",
                     "estimator_steps", "max_turns", "corpus_sessions", "inform_chunk"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("lr", "estimator_lr", "imitation_lr", "grad_clip"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("gamma", "gae_lambda", "p_fail", "abandon_prob", "expert_epsilon"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if not 0 < self.clip_eps < 1:
            raise ConfigError("clip_eps must lie in (0, 1)")
        for name in ("ontology", "corpus"):
            p = getattr(self, name)
            if p is not None and not Path(p).exists():
                raise ConfigError(f"{name} file not found: {p}")
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e

    @property
    def sim_config(self) -> SimulatorConfig:
        return SimulatorConfig(max_turns=self.max_turns, p_fail=self.p_fail, abandon_prob=self.abandon_prob,
                               inform_chunk=self.inform_chunk)


def make_streams(seed: int) -> dict:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(ss) for name, ss in zip(STREAMS, children)}


def load_world(config: TrainConfig) -> World:
    return World.load(config.ontology) if config.ontology else default_world(config.ontology_seed)


@dataclass
class Rollout:
    sessions: list
    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    log_prob_old: np.ndarray
    episode_of: np.ndarray

    @property
    def transitions(self) -> Transitions:
        return Transitions(self.states, self.actions, self.next_states, self.terminals)

    def __len__(self):
        return len(self.states)


def collect_rollouts(policy: PolicyNet, env: DialogEnv, n_episodes: int, rng, p_fail: float | None = None) -> Rollout:
    """Play ``n_episodes`` sessions with actions sampled from the policy."""
    world = env.world
    dim, n_acts = env.state_dim, len(world.ontology)
    if n_episodes == 0:
        z = np.zeros((0, dim))
        return Rollout([], z, np.zeros((0, n_acts)), z.copy(), np.zeros(0), np.zeros(0), np.zeros(0, int))
    p_fail = env.sim.config.p_fail if p_fail is None else p_fail
    goals = [sample_goal(world.ontology, world.db, world.goal_stats, rng, p_fail) for _ in range(n_episodes)]
    # seeds drawn from rng itself, so a restored bit-generator state replays them
    sim_rngs = [np.random.default_rng(int(k)) for k in rng.integers(0, 2**63, size=n_episodes)]
    onto = world.ontology

    def decide(states, beliefs, user_actions):
        smp = policy.sample(states, rng)
        return [(onto.decode(smp.action[k]), smp.sampled[k], float(smp.log_prob[k])) for k in range(len(states))]

    sessions = env.run(goals, sim_rngs, decide)
    parts = [session_transitions(s, dim, n_acts, onto) for s in sessions]
    states, actions, next_states, terminals = (np.concatenate([p[k] for p in parts]) for k in range(4))
    logp = np.array([t.log_prob for s in sessions for t in s.turns])
    episode_of = np.concatenate([np.full(len(s), i) for i, s in enumerate(sessions)])
    return Rollout(sessions, states, actions, next_states, terminals, logp, episode_of)


class Trainer:
    """Holds every piece of mutable training state for one run."""

    def __init__(self, config: TrainConfig, world: World | None = None, corpus=None):
        self.config = config.validate()
        self.world = world or load_world(config)
        self.env = DialogEnv(self.world, config.sim_config)
        onto = self.world.ontology
        self.streams = make_streams(config.seed)
        dim, n_acts = self.env.state_dim, len(onto)
        init = self.streams["init"]
        hidden = (config.hidden_dim, config.hidden_dim)
        self.policy = PolicyNet(dim, n_acts, hidden, rng=init, fallback_index=onto.act_to_index(
            next(a for a in onto.act_vocabulary if a.intent == "reqmore")))
        self.value = ValueNet(dim, hidden, rng=init)
        mode = {"gdpl-discr": DISCRIMINATOR, "gdpl-sess": SESSION, "aldm": SESSION}.get(config.algo, PAIRWISE)
        self.estimator = RewardEstimator(dim, n_acts, config.gamma, config.hidden_dim, rng=init, mode=mode)
        self.policy_opt = Adam(self.policy.net.n_params, lr=config.lr, clip=config.grad_clip)
        self.value_opt = Adam(self.value.net.n_params, lr=config.lr, clip=config.grad_clip)
        self.est_trainer = EstimatorTrainer(self.estimator, lr=config.estimator_lr, clip=config.grad_clip,
                                            weight_decay=config.estimator_weight_decay)
        if corpus is None:
            corpus = self._load_corpus()
        self.corpus = corpus
        self.sampler = CorpusSampler(corpus, onto, dim, self.streams["human"])
        self.iteration = 0
        self.history: list[dict] = []
        self.pretrain_report = None

    def _load_corpus(self):
        c = self.config
        if c.corpus:
            return read_corpus(c.corpus, self.world)
        sessions, _ = generate_corpus(c.corpus_sessions, self.world, c.sim_config, c.expert_epsilon, c.corpus_seed)
        return sessions

    # -- phases -------------------------------------------------------------

    def pretrain(self) -> dict:
        c = self.config
        pairs = self.sampler.pairs
        self.pretrain_report = imitation_pretrain(
            self.policy, pairs.states, pairs.actions, self.streams["imitation"], epochs=c.imitation_epochs,
            batch_size=c.batch_size, lr=c.imitation_lr, clip=c.grad_clip, log=log.info)
        return self.pretrain_report

    def _update_estimator(self, rollout: Rollout) -> float:
        """One full-batch step, or ``estimator_epochs`` minibatch passes over D_pi.

        Each policy minibatch is paired with an equally sized fresh sample of
        demonstration pairs.  Returns J_f (or the discriminator loss) of the
        last step.
        """
        c = self.config
        n = len(rollout)
        if c.algo == "aldm" or c.estimator_epochs == 0:
            batches = [np.arange(n)] * c.estimator_steps
        else:
            rng = self.streams["update"]
            batches = []
            for _ in range(c.estimator_epochs):
                order = rng.permutation(n)
                batches += [order[k:k + c.batch_size] for k in range(0, n, c.batch_size)]
        j = float("nan")
        for idx in batches:
            if c.algo == "aldm":
                j, grad = self._session_level_loss(rollout)
            else:
                gen = rollout.transitions.take(idx)
                human = self.sampler.sample_pairs(len(idx))
                if c.algo == "gdpl-discr":
                    both = concat_transitions([human, gen])
                    logp = self.policy.log_prob(both.states, both.actions)
                    j, grad = discriminator_loss_from_logits(self.estimator, both, logp, len(human))
                else:
                    j, grad = estimator_loss(self.estimator, human, gen)
            if not math.isfinite(j):
                raise FloatingPointError("non-finite estimator objective")
            self.est_trainer.step(grad)
        return j

    def _session_level_loss(self, rollout: Rollout):
        """Session-level objective over discounted session scores sum_t gamma^t f_t."""
        c = self.config
        human_sessions = self.sampler.sample_sessions(len(rollout.sessions))
        onto = self.world.ontology
        parts = [session_transitions(s, self.env.state_dim, len(onto), onto) for s in human_sessions]
        human = Transitions(*(np.concatenate([p[k] for p in parts]) for k in range(4)))
        h_disc = np.concatenate([c.gamma ** np.arange(len(s)) for s in human_sessions])
        p_disc = np.concatenate([c.gamma ** np.arange(len(s)) for s in rollout.sessions])
        both = concat_transitions([human, rollout.transitions])
        fv = self.estimator.f(both)
        nh, npol = len(human_sessions), len(rollout.sessions)
        j = np.sum(h_disc * fv[:len(human)]) / nh - np.sum(p_disc * fv[len(human):]) / npol
        df = np.concatenate([-h_disc / nh, p_disc / npol])
        return float(j), self.estimator.backward_f(both, df)

    def _rewards(self, rollout: Rollout) -> np.ndarray:
        c = self.config
        if c.algo == "ppo-handcrafted":
            r = np.empty(len(rollout))
            k = 0
            for s in rollout.sessions:
                success = evaluate.session_outcome(s, self.world).success
                for t in range(len(s)):
                    r[k] = handcrafted_reward(t == len(s) - 1, bool(success), c.max_turns)
                    k += 1
            return r
        fv = self.estimator.f(rollout.transitions) - self.reward_offset()
        if c.algo == "aldm":
            r = np.zeros(len(rollout))
            ends = np.flatnonzero(rollout.terminals)
            start = 0
            for end in ends:
                disc = c.gamma ** np.arange(end - start + 1)
                r[end] = np.sum(disc * fv[start:end + 1])
                start = end + 1
            return r
        r = fv - self.policy.log_prob(rollout.states, rollout.actions)
        if c.algo == "gdpl-sess":
            out = np.empty_like(r)
            start = 0
            for end in np.flatnonzero(rollout.terminals):
                out[start:end + 1] = session_mode_reward(r[start:end + 1])
                start = end + 1
            return out
        return r

    def reward_offset(self) -> float:
        """Mean of f over all demonstration pairs, or 0 with centering off.

        J_f does not change when a constant is added to f, so the level of f
        is left to initialization and drift.  Under a per-turn reward that
        level acts as a bonus or a charge for every extra turn; pinning the
        demonstration mean to 0 removes it.
        """
        if not self.config.center_reward:
            return 0.0
        return float(np.mean(self.estimator.f(self.sampler.pairs)))

    def _ppo_update(self, rollout: Rollout, rewards: np.ndarray):
        c = self.config
        values = np.append(self.value(rollout.states), 0.0)
        adv, targets = gae(rewards, values, c.gamma, c.gae_lambda, rollout.terminals.astype(bool))
        if c.normalize_advantages and len(adv) > 1 and adv.std() > 0:
            adv = (adv - adv.mean()) / adv.std()
        rng = self.streams["update"]
        n = len(rollout)
        ploss, vloss = [], []
        for _ in range(c.ppo_epochs):
            order = rng.permutation(n)
            for start in range(0, n, c.batch_size):
                idx = order[start:start + c.batch_size]
                pl, pg = ppo_policy_loss(self.policy, rollout.states[idx], rollout.actions[idx],
                                         rollout.log_prob_old[idx], adv[idx], c.clip_eps)
                vl, vg = value_loss(self.value, rollout.states[idx], targets[idx])
                if not (math.isfinite(pl) and math.isfinite(vl)):
                    raise FloatingPointError("non-finite PPO loss")
                self.policy_opt.step(self.policy.net.params, pg)
                self.value_opt.step(self.value.net.params, vg)
                ploss.append(pl)
                vloss.append(vl)
        return float(np.mean(ploss)), float(np.mean(vloss))

    def train_iteration(self) -> dict:
        c = self.config
        saved = self._snapshot()
        self.policy.snapshot()
        rollout = collect_rollouts(self.policy, self.env, c.episodes_per_iteration, self.streams["rollout"])
        outcomes = [evaluate.session_outcome(s, self.world) for s in rollout.sessions]
        summary = evaluate.summarize(outcomes)
        report = {"iteration": self.iteration + 1, "j_f": float("nan"), "mean_reward": float("nan"),
                  "policy_loss": float("nan"), "value_loss": float("nan"),
                  "success": summary["success"], "inform_f1": summary["inform_f1"],
                  "match": summary["match"], "turns": summary["turns"], "aborted": 0}
        try:
            if c.algo != "ppo-handcrafted":
                report["j_f"] = self._update_estimator(rollout)
            rewards = self._rewards(rollout)
            if not np.all(np.isfinite(rewards)):
                raise FloatingPointError("non-finite rewards")
            report["mean_reward"] = float(np.mean(rewards))
            report["policy_loss"], report["value_loss"] = self._ppo_update(rollout, rewards)
        except FloatingPointError as e:
            log.error("iteration %d aborted: %s; restoring previous parameters", self.iteration + 1, e)
            self._restore(saved)
            report["aborted"] = 1
        self.iteration += 1
        self.history.append(report)
        return report

    # -- evaluation -----------------------------------------------------------

    def evaluate(self, n: int | None = None, seed: int | None = None, with_traces: bool = False,
                 greedy: bool | None = None):
        c = self.config
        n = c.eval_episodes if n is None else n
        seed = (c.eval_seed if c.eval_seed is not None else c.seed) if seed is None else seed
        sessions = run_policy(self.policy, self.env, n, seed, greedy if greedy is not None else c.eval_greedy)
        outcomes = []
        onto = self.world.ontology
        offset = self.reward_offset() if with_traces else 0.0
        for s in sessions:
            trace = None
            if with_traces and len(s):
                tr = Transitions(*session_transitions(s, self.env.state_dim, len(onto), onto))
                trace = list(self.estimator.f(tr) - offset - self.policy.log_prob(tr.states, tr.actions))
            outcomes.append(evaluate.session_outcome(s, self.world, trace))
        return sessions, outcomes

    # -- checkpoints ----------------------------------------------------------

    def _snapshot(self):
        return (self.policy.net.params.copy(), self.value.net.params.copy(), self.estimator.params.copy(),
                self.policy_opt.state_dict(), self.value_opt.state_dict(), self.est_trainer.opt.state_dict())

    def _restore(self, snap):
        p, v, e, po, vo, eo = snap
        self.policy.net.params[...] = p
        self.value.net.params[...] = v
        self.estimator.set_params(e)
        self.policy_opt.load_state_dict(po)
        self.value_opt.load_state_dict(vo)
        self.est_trainer.opt.load_state_dict(eo)

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "config.json").write_text(json.dumps(asdict(self.config), indent=1, sort_keys=True) + "\n")
        self.policy.net.save(d / "policy.npz")
        self.value.net.save(d / "value.npz")
        self.estimator.g.save(d / "reward_g.npz")
        self.estimator.h.save(d / "reward_h.npz")
        opt = {}
        for name, o in (("policy", self.policy_opt), ("value", self.value_opt), ("estimator", self.est_trainer.opt)):
            st = o.state_dict()
            opt[f"{name}_m"], opt[f"{name}_v"] = st["m"], st["v"]
        opt["old_params"] = self.policy.old_params
        opt["sampler_order"] = self.sampler.state_dict()["order"]
        save_params(d / "train_state.npz", np.zeros(0), opt)
        meta = {
            "iteration": self.iteration,
            "history": self.history,
            "optim": {name: {"t": o.t, "skipped": o.skipped} for name, o in
                      (("policy", self.policy_opt), ("value", self.value_opt), ("estimator", self.est_trainer.opt))},
            "sampler_pos": self.sampler._pos,
            "streams": {k: r.bit_generator.state for k, r in self.streams.items()},
            "pretrain": self.pretrain_report,
        }
        (d / "train_state.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
        return d

    @classmethod
    def load(cls, directory, world: World | None = None, corpus=None, resume: bool = True) -> "Trainer":
        d = Path(directory)
        if not (d / "config.json").exists():
            raise FileNotFoundError(f"no checkpoint at {d}")
        config = TrainConfig.from_dict(json.loads((d / "config.json").read_text()))
        tr = cls(config, world, corpus)
        tr.policy.net.params[...] = load_params(d / "policy.npz")[0]
        tr.value.net.params[...] = load_params(d / "value.npz")[0]
        tr.estimator.g.params[...] = load_params(d / "reward_g.npz")[0]
        tr.estimator.h.params[...] = load_params(d / "reward_h.npz")[0]
        if resume and (d / "train_state.json").exists():
            meta = json.loads((d / "train_state.json").read_text())
            _, arrays = load_params(d / "train_state.npz")
            for name, o in (("policy", tr.policy_opt), ("value", tr.value_opt), ("estimator", tr.est_trainer.opt)):
                o.load_state_dict({"m": arrays[f"{name}_m"], "v": arrays[f"{name}_v"], **meta["optim"][name]})
            tr.policy.old_params = arrays["old_params"].copy()
            for k, st in meta["streams"].items():
                tr.streams[k].bit_generator.state = st
            tr.sampler.load_state_dict({"rng": meta["streams"]["human"], "order": arrays["sampler_order"],
                                        "pos": meta["sampler_pos"]})
            tr.iteration = meta["iteration"]
            tr.history = meta["history"]
            tr.pretrain_report = meta.get("pretrain")
        return tr


def run_policy(policy: PolicyNet, env: DialogEnv, n: int, seed: int, greedy: bool = False,
               p_fail: float | None = None):
    """Sessions of ``policy`` on ``n`` goals drawn from the evaluation stream of ``seed``.

    Goals and simulator randomness depend only on ``seed`` and the episode
    index, so different policies face the same users.  With ``greedy`` each
    act is emitted iff its probability exceeds one half; otherwise actions
    are sampled from a separate stream.
    """
    world = env.world
    p_fail = env.sim.config.p_fail if p_fail is None else p_fail
    rngs = [session_rng(seed + 7_919, i) for i in range(n)]
    goals = [sample_goal(world.ontology, world.db, world.goal_stats, r, p_fail) for r in rngs]
    act_rng = np.random.default_rng(np.random.SeedSequence(seed + 7_919, spawn_key=(n, 1)))
    onto = world.ontology

    def decide(states, beliefs, user_actions):
        if greedy:
            acts = policy.greedy(states)
            return [(onto.decode(a), a, None) for a in acts]
        smp = policy.sample(states, act_rng)
        return [(onto.decode(smp.action[k]), smp.sampled[k], float(smp.log_prob[k])) for k in range(len(states))]

    return env.run(goals, rngs, decide)


def write_rows(path, rows, columns=REPORT_COLUMNS) -> None:
    lines = ["\t".join(columns)]
    for r in rows:
        lines.append("\t".join(_fmt(r.get(c)) for c in columns))
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else "nan"
    return str(v)


def run_experiment(config: TrainConfig, out_dir=None, world: World | None = None, corpus=None,
                   progress=None) -> dict:
    """Pretrain, run ``config.iterations`` iterations, then evaluate on fresh goals.

    Writes ``metrics.tsv`` (one row per iteration), ``eval.json`` and a
    checkpoint directory when ``out_dir`` is given.  Returns the final
    evaluation summary together with the trainer.
    """
    tr = Trainer(config, world, corpus)
    tr.pretrain()
    out = Path(out_dir) if out_dir is not None else None
    for _ in range(config.iterations):
        rep = tr.train_iteration()
        if progress:
            progress(rep)
        if out is not None and config.checkpoint_every and tr.iteration % config.checkpoint_every == 0:
            tr.save(out / "checkpoint")
    sessions, outcomes = tr.evaluate(with_traces=True)
    summary = evaluate.summarize(outcomes)
    summary["kl_turns"] = evaluate.kl_turns([len(s) for s in sessions], [len(s) for s in tr.corpus],
                                            config.max_turns)
    summary["returns"] = evaluate.return_report(outcomes, config.gamma)
    summary["pretrain"] = tr.pretrain_report
    summary["algo"] = config.algo
    summary["seed"] = config.seed
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_rows(out / "metrics.tsv", tr.history)
        (out / "eval.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
        tr.save(out / "checkpoint")
    return {"summary": summary, "trainer": tr, "sessions": sessions, "outcomes": outcomes}
