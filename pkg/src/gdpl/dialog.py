"""Episode loop wiring the user simulator, the tracker and a system policy.

One dialog turn is one user action followed by one system action.  Several
episodes can run in lockstep so a neural policy decides for all live
episodes with one batched forward pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ontology import DialogAct, UserGoal, World
from .simulator import AgendaSimulator, SimulatorConfig, UserState
from .tracker import BeliefState, StateEncoder, lexicalize, update


@dataclass
class Turn:
    user_action: list[DialogAct]
    state: np.ndarray
    system_action: list[DialogAct]          # lexicalized
    belief: dict | None = None              # snapshot after the user's act
    sampled: np.ndarray | None = None       # policy-space action as drawn
    log_prob: float | None = None


@dataclass
class Session:
    goal: UserGoal
    turns: list[Turn] = field(default_factory=list)
    satisfied: bool = False
    booked: dict[str, str] = field(default_factory=dict)

    def __len__(self):
        return len(self.turns)


class DialogEnv:
    def __init__(self, world: World, sim_config: SimulatorConfig | None = None):
        self.world = world
        self.ontology = world.ontology
        self.sim = AgendaSimulator(world.ontology, sim_config)
        self.encoder = StateEncoder(world.ontology, world.db)

    @property
    def state_dim(self):
        return self.encoder.dim

    def run(self, goals, sim_rngs, decide, keep_beliefs=False) -> list[Session]:
        """Play one episode per goal.

        ``decide(states, beliefs, user_actions)`` receives the state matrix
        of live episodes and returns, per episode, a tuple
        ``(delexicalized acts, sampled vector or None, log-prob or None)``.
        """
        onto = self.ontology
        live = []
        sessions = []
        for goal, rng in zip(goals, sim_rngs):
            us, ua = self.sim.reset(goal, rng)
            sessions.append(Session(goal))
            live.append(_Live(us, BeliefState.empty(onto), ua, []))
        active = list(range(len(goals)))
        while active:
            for i in active:
                ep = live[i]
                ep.belief = update(onto, ep.belief, ep.user_action, "user")
                ep.state = self.encoder.vectorize(ep.belief, ep.user_action, ep.prev_system)
            states = np.array([live[i].state for i in active])
            decisions = decide(states, [live[i].belief for i in active], [live[i].user_action for i in active])
            still = []
            for i, (acts, sampled, logp) in zip(active, decisions):
                ep = live[i]
                lex = lexicalize(onto, self.world.db, ep.belief, acts)
                sessions[i].turns.append(Turn(
                    ep.user_action, ep.state, lex,
                    ep.belief.snapshot() if keep_beliefs else None, sampled, logp))
                ep.belief = update(onto, ep.belief, lex, "system")
                us, ua, terminal = self.sim.step(ep.user, lex)
                ep.user_action = ua
                ep.prev_system = lex
                if terminal:
                    sessions[i].satisfied = us.satisfied
                    sessions[i].booked = dict(us.booked)
                else:
                    still.append(i)
            active = still
        return sessions


@dataclass
class _Live:
    user: UserState
    belief: BeliefState
    user_action: list
    prev_system: list
    state: np.ndarray | None = None


def replay_states(world: World, session: Session) -> list[np.ndarray]:
    """Recompute every turn's state vector from the stored transcript."""
    onto = world.ontology
    enc = StateEncoder(onto, world.db)
    belief = BeliefState.empty(onto)
    prev = []
    out = []
    for turn in session.turns:
        belief = update(onto, belief, turn.user_action, "user")
        out.append(enc.vectorize(belief, turn.user_action, prev))
        belief = update(onto, belief, turn.system_action, "system")
        prev = turn.system_action
    return out


def session_transitions(session: Session, state_dim: int, n_acts: int, ontology=None):
    """(s, a, s', terminal) arrays for one session; a is the policy-space action.

    When a turn has no stored sampled vector, the action is the multi-hot
    encoding of its (delexicalized) system acts.
    """
    T = len(session.turns)
    states = np.array([t.state for t in session.turns]).reshape(T, state_dim)
    actions = np.zeros((T, n_acts))
    for k, t in enumerate(session.turns):
        actions[k] = t.sampled if t.sampled is not None else ontology.encode(t.system_action)
    next_states = np.zeros_like(states)
    next_states[:-1] = states[1:]
    terminals = np.zeros(T)
    if T:
        terminals[-1] = 1.0
    return states, actions, next_states, terminals
