"""Demonstration corpus: a scripted expert plays the simulator.

Corpus file format (JSON lines, one session per line, keys sorted)::

    {"schema_version": 1, "state_dim": int, "goal": {...}, "satisfied": bool,
     "booked": {domain: entity_id},
     "turns": [{"user": [[domain, intent, slot, value], ...],
                "system": [[domain, intent, slot, value], ...],
                "state": [indices of nonzero state bits],
                "belief": {domain: {"constraints", "book", "pending", "booked"}}}]}
"""
from __future__ import annotations

import json
import logging
from collections import Counter
from pathlib import Path

import numpy as np

from . import evaluate
from .dialog import DialogEnv, Session, Turn, session_transitions
from .ontology import DOMAIN_COUNT_WEIGHTS, GENERAL, DialogAct, UserGoal, World, sample_goal
from .reward import Transitions
from .simulator import SimulatorConfig

SCHEMA_VERSION = 1
log = logging.getLogger(__name__)


def expert_act(world: World, belief, user_action, rng=None, epsilon: float = 0.0) -> list[DialogAct]:
    """Rule-based system turn.

    Offers an entity (or reports no match plus an alternative offer) when the
    user states constraints, answers pending requests, asks for missing
    booking details, and books once they are known and the user has stopped
    adding constraints.  With probability
    ``epsilon`` per answering turn, one answer is dropped or one unrequested
    slot is added, split evenly.
    """
    onto, db = world.ontology, world.db
    acts, informs = [], []
    for d in onto.domains:
        b = belief.domains[d.name]
        n = db.count(d.name, b.constraints)
        told = any(a.domain == d.name and a.intent == "inform" and a.slot in d.informable for a in user_action)
        if told:
            if n == 0:
                acts.append(DialogAct(d.name, "nooffer"))
            acts.append(DialogAct(d.name, "offer"))
        if n > 0:
            informs += [DialogAct(d.name, "inform", s) for s in d.requestable if s in b.pending]
        if d.bookable and b.booked is None and b.book:
            missing = [s for s in d.book_slots if s not in b.book]
            if missing:
                acts += [DialogAct(d.name, "request", s) for s in missing]
            elif n > 0 and not told and any(
                    a.domain == d.name and a.intent == "inform" and a.slot in d.book_slots for a in user_action):
                # the user has moved on to booking, so the constraints are complete
                acts.append(DialogAct(d.name, "book"))
    if informs and epsilon > 0 and rng is not None and rng.random() < epsilon:
        if rng.random() < 0.5:
            informs.pop(int(rng.integers(len(informs))))
        else:
            dom = informs[0].domain
            spare = [s for s in onto.domain(dom).requestable if DialogAct(dom, "inform", s) not in informs]
            if spare:
                informs.append(DialogAct(dom, "inform", spare[int(rng.integers(len(spare)))]))
    acts += informs
    if not acts:
        acts.append(DialogAct(GENERAL, "reqmore"))
    return sorted(set(acts), key=onto.act_to_index)


def session_rng(seed: int, index: int):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def play_expert(world: World, sim_config: SimulatorConfig, epsilon: float, rng) -> Session:
    env = DialogEnv(world, sim_config)
    goal = sample_goal(world.ontology, world.db, world.goal_stats, rng, sim_config.p_fail)

    def decide(states, beliefs, user_actions):
        return [(expert_act(world, b, u, rng, epsilon), None, None) for b, u in zip(beliefs, user_actions)]

    return env.run([goal], [rng], decide, keep_beliefs=True)[0]


def _generate_range(args):
    world_dict, sim_config, epsilon, seed, lo, hi = args
    world = World.from_dict(world_dict)
    return [session_to_line(play_expert(world, sim_config, epsilon, session_rng(seed, i))) for i in range(lo, hi)]


def generate_corpus(n_sessions: int, world: World, sim_config: SimulatorConfig, epsilon: float, seed: int,
                    out_path=None, workers: int = 1, success_floor: float | None = None):
    """Generate ``n_sessions`` expert dialogs; optionally write them to ``out_path``.

    Session i draws from its own seed stream, so output does not depend on
    ``workers``.  Returns (sessions, report).
    """
    if n_sessions < 1:
        raise ValueError("n_sessions must be >= 1")
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        bounds = np.linspace(0, n_sessions, workers + 1).astype(int)
        jobs = [(world.to_dict(), sim_config, epsilon, seed, int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]
        with ProcessPoolExecutor(workers) as pool:
            lines = [ln for chunk in pool.map(_generate_range, jobs) for ln in chunk]
        sessions = [session_from_line(ln, world) for ln in lines]
    else:
        sessions = [play_expert(world, sim_config, epsilon, session_rng(seed, i)) for i in range(n_sessions)]
        lines = [session_to_line(s) for s in sessions]
    if out_path is not None:
        path = Path(out_path)
        try:
            path.write_text("".join(ln + "\n" for ln in lines))
        except OSError as e:
            raise OSError(f"cannot write corpus to {path}: {e}") from e
    report = corpus_report(world, sessions)
    if success_floor is not None and report["success"] < success_floor:
        log.warning("expert success %.3f below floor %.3f", report["success"], success_floor)
    return sessions, report


def corpus_report(world: World, sessions) -> dict:
    outcomes = [evaluate.session_outcome(s, world) for s in sessions]
    turns = [len(s) for s in sessions]
    return {
        "sessions": len(sessions),
        "success": float(np.mean([o.success for o in outcomes])),
        "mean_turns": float(np.mean(turns)),
        "turn_histogram": dict(sorted(Counter(turns).items())),
    }


def _acts(acts):
    return [list(a) for a in acts]


def session_to_line(session: Session) -> str:
    dim = len(session.turns[0].state) if session.turns else 0
    rec = {
        "schema_version": SCHEMA_VERSION,
        "state_dim": dim,
        "goal": session.goal.to_dict(),
        "satisfied": bool(session.satisfied),
        "booked": session.booked,
        "turns": [
            {"user": _acts(t.user_action), "system": _acts(t.system_action),
             "state": [int(i) for i in np.flatnonzero(t.state)], "belief": t.belief}
            for t in session.turns
        ],
    }
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


def session_from_line(line: str, world: World | None = None) -> Session:
    rec = json.loads(line)
    if rec.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported corpus schema_version {rec.get('schema_version')!r}")
    dim = rec["state_dim"]
    turns = []
    for t in rec["turns"]:
        state = np.zeros(dim)
        state[t["state"]] = 1.0
        turns.append(Turn([DialogAct(*a) for a in t["user"]], state,
                          [DialogAct(*a) for a in t["system"]], t["belief"]))
    return Session(UserGoal.from_dict(rec["goal"]), turns, rec["satisfied"], rec["booked"])


def write_corpus(sessions, path) -> None:
    Path(path).write_text("".join(session_to_line(s) + "\n" for s in sessions))


def read_corpus(path, world: World | None = None) -> list[Session]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise OSError(f"cannot read corpus {path}: {e}") from e
    return [session_from_line(ln, world) for ln in text.splitlines() if ln.strip()]


class CorpusSampler:
    """Uniform sampling of demonstration pairs, without replacement inside an epoch."""

    def __init__(self, sessions, ontology, state_dim, rng):
        if not sessions:
            raise ValueError("empty corpus")
        self.sessions = list(sessions)
        parts = [session_transitions(s, state_dim, len(ontology), ontology) for s in self.sessions]
        self.pairs = Transitions(*(np.concatenate([p[k] for p in parts]) for k in range(4)))
        self.session_of_pair = np.concatenate([np.full(len(s), i) for i, s in enumerate(self.sessions)])
        self.rng = rng
        self._order = rng.permutation(len(self.pairs))
        self._pos = 0

    def __len__(self):
        return len(self.pairs)

    def next_indices(self, batch_size: int) -> np.ndarray:
        out = []
        need = batch_size
        while need > 0:
            if self._pos >= len(self._order):
                self._order = self.rng.permutation(len(self.pairs))
                self._pos = 0
            take = self._order[self._pos:self._pos + need]
            self._pos += len(take)
            need -= len(take)
            out.append(take)
        return np.concatenate(out)

    def sample_pairs(self, batch_size: int) -> Transitions:
        return self.pairs.take(self.next_indices(batch_size))

    def sample_sessions(self, k: int) -> list[Session]:
        return [self.sessions[i] for i in self.rng.choice(len(self.sessions), size=k, replace=k > len(self.sessions))]

    def state_dict(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "order": self._order.copy(), "pos": self._pos}

    def load_state_dict(self, st) -> None:
        self.rng.bit_generator.state = st["rng"]
        self._order = np.array(st["order"])
        self._pos = int(st["pos"])


def sample_batch(sampler: CorpusSampler, batch_size: int):
    """Pair-level view plus the whole sessions those pairs come from."""
    idx = sampler.next_indices(batch_size)
    sess = sorted(set(int(i) for i in sampler.session_of_pair[idx]))
    return sampler.pairs.take(idx), [sampler.sessions[i] for i in sess]


def goal_stats_from_corpus(world: World, sessions) -> dict:
    """Slot frequencies of the goals in a corpus, in the goal-stats layout."""
    onto = world.ontology
    per_domain = Counter()
    cons, reqs, book = Counter(), Counter(), Counter()
    ndom = Counter()
    for s in sessions:
        g = s.goal
        ndom[len(g.domains)] += 1
        for d, dg in g.domains.items():
            per_domain[d] += 1
            cons.update((d, k) for k in dg.constraints)
            reqs.update((d, k) for k in dg.requests)
            book[d] += bool(dg.book)
    stats = {"domain_count_weights": [ndom[k] for k in (1, 2, 3)] if ndom else list(DOMAIN_COUNT_WEIGHTS),
             "domains": {}}
    for d in onto.domains:
        n = max(per_domain[d.name], 1)
        stats["domains"][d.name] = {
            "constraints": {k: cons[(d.name, k)] / n for k in d.informable},
            "requests": {k: reqs[(d.name, k)] / n for k in d.requestable},
            "book": book[d.name] / n,
        }
    return stats
