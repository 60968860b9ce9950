import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gdpl import evaluate
from gdpl.corpus import play_expert, session_rng
from gdpl.ontology import GENERAL, NONE, DialogAct, DomainError, DomainGoal, UserGoal, default_world
from gdpl.simulator import AgendaSimulator, SimulatorConfig, SimulatorUsageError
from gdpl.tracker import BeliefState, lexicalize, update

REQMORE = [DialogAct(GENERAL, "reqmore", NONE, NONE)]


def entity(world, domain, k=0):
    return world.db.tables[domain][k]


def one_domain_goal(world, requests=(), book=False):
    ent = entity(world, "restaurant")
    spec = world.ontology.domain("restaurant")
    bk = {s: spec.values[s][0] for s in spec.book_slots} if book else {}
    return UserGoal({"restaurant": DomainGoal({"food": ent["food"]}, tuple(requests), bk)}, ("restaurant",))


def test_single_constraint_first_action(world):
    sim = AgendaSimulator(world.ontology)
    goal = one_domain_goal(world)
    _, action = sim.reset(goal, np.random.default_rng(0))
    assert action == [DialogAct("restaurant", "inform", "food", goal.domains["restaurant"].constraints["food"])]


def failed_goal(world):
    ent = entity(world, "hotel")
    final = {"area": ent["area"], "stars": ent["stars"]}
    spec = world.ontology.domain("hotel")
    failed = next(dict(final, stars=v) for v in spec.values["stars"]
                  if world.db.count("hotel", dict(final, stars=v)) == 0)
    return UserGoal({"hotel": DomainGoal(final, ("phone",))}, ("hotel",), {"hotel": failed})


def test_failed_goal_stated_first(world):
    goal = failed_goal(world)
    sim = AgendaSimulator(world.ontology, SimulatorConfig(inform_chunk=10))
    _, action = sim.reset(goal, np.random.default_rng(0))
    assert {(a.slot, a.value) for a in action} == set(goal.failed["hotel"].items())


def test_nooffer_switches_to_final_constraints(world):
    goal = failed_goal(world)
    sim = AgendaSimulator(world.ontology, SimulatorConfig(inform_chunk=10))
    state, _ = sim.reset(goal, np.random.default_rng(0))
    _, action, _ = sim.step(state, [DialogAct("hotel", "nooffer", NONE, NONE)])
    final = goal.domains["hotel"].constraints
    changed = {k for k in final if final[k] != goal.failed["hotel"][k]}
    said = {a.slot: a.value for a in action if a.intent == "inform"}
    assert changed <= set(said) and all(said[k] == final[k] for k in said)


def test_three_domain_first_action_names_first_domain(world):
    goals = {d: DomainGoal({s: entity(world, d)[s] for s in world.ontology.domain(d).informable[:2]})
             for d in ("taxi", "hotel", "restaurant")}
    goal = UserGoal(goals, ("taxi", "hotel", "restaurant"))
    for seed in range(20):
        _, action = AgendaSimulator(world.ontology).reset(goal, np.random.default_rng(seed))
        assert {a.domain for a in action} == {"taxi"}


def test_partial_answer_rerequests_remainder(world):
    goal = one_domain_goal(world, requests=("address", "phone"))
    sim = AgendaSimulator(world.ontology)
    state, _ = sim.reset(goal, np.random.default_rng(0))
    state, action, _ = sim.step(state, REQMORE)
    assert set(action) == {DialogAct("restaurant", "request", s, NONE) for s in ("address", "phone")}
    state, action, done = sim.step(state, [DialogAct("restaurant", "inform", "address", "somewhere")])
    assert action == [DialogAct("restaurant", "request", "phone", NONE)] and not done
    state, action, done = sim.step(state, [DialogAct("restaurant", "inform", "phone", "123")])
    assert done and state.satisfied and action == [DialogAct(GENERAL, "bye", NONE, NONE)]


def test_step_after_terminal_is_an_error(world):
    sim = AgendaSimulator(world.ontology)
    state, _ = sim.reset(one_domain_goal(world), np.random.default_rng(0))
    state, _, done = sim.step(state, REQMORE)
    assert done and state.satisfied
    with pytest.raises(SimulatorUsageError):
        sim.step(state, REQMORE)


def test_turn_cap_ends_unsatisfied(world):
    sim = AgendaSimulator(world.ontology, SimulatorConfig(max_turns=7))
    state, _ = sim.reset(one_domain_goal(world, requests=("phone",)), np.random.default_rng(0))
    done, n = False, 0
    while not done:
        state, _, done = sim.step(state, REQMORE)
        n += 1
    assert n == 7 and not state.satisfied


def test_abandonment_after_stalling(world):
    sim = AgendaSimulator(world.ontology, SimulatorConfig(abandon_prob=1.0, patience=3))
    state, _ = sim.reset(one_domain_goal(world, requests=("phone",)), np.random.default_rng(0))
    done, n = False, 0
    while not done:
        state, _, done = sim.step(state, REQMORE)
        n += 1
    assert not state.satisfied and n <= 1 + 3


def test_invalid_goal_rejected(world):
    with pytest.raises(DomainError):
        AgendaSimulator(world.ontology).reset(UserGoal({}, ()), np.random.default_rng(0))


def test_expert_liveness_bound():
    world = default_world(0)
    cfg = SimulatorConfig()
    for i in range(300):
        s = play_expert(world, cfg, 0.0, session_rng(11, i))
        g = s.goal
        assert s.satisfied and evaluate.session_outcome(s, world).success
        assert len(s) <= g.n_constraints + g.n_requests + g.n_book + 2


def random_system_episode(world, sim, goal, rng):
    """Random delexicalized acts, lexicalized from the tracked belief; returns the final user state."""
    onto = world.ontology
    state, ua = sim.reset(goal, rng)
    belief = BeliefState.empty(onto)
    turns = 0
    while True:
        belief = update(onto, belief, ua, "user")
        acts = [onto.index_to_act(i) for i in np.flatnonzero(rng.random(len(onto)) < 0.08)]
        lex = lexicalize(onto, world.db, belief, acts)
        belief = update(onto, belief, lex, "system")
        state, ua, done = sim.step(state, lex)
        turns += 1
        assert turns == state.turn_count <= sim.config.max_turns
        if done:
            return state


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_no_spurious_satisfaction(seed):
    from gdpl.ontology import sample_goal
    world = default_world(0)
    rng = np.random.default_rng(seed)
    goal = sample_goal(world.ontology, world.db, world.goal_stats, rng, 0.3)
    sim = AgendaSimulator(world.ontology, SimulatorConfig(max_turns=20))
    state = random_system_episode(world, sim, goal, rng)
    assert state.terminal
    with pytest.raises(SimulatorUsageError):
        sim.step(state, REQMORE)
    if state.satisfied:
        for d, g in goal.domains.items():
            assert all((d, s) in state.informed for s in g.requests)
            if g.book:
                assert d in state.booked
                assert state.book_told[d] >= set(g.book)


def test_same_seed_same_transcript():
    world = default_world(0)
    a = play_expert(world, SimulatorConfig(), 0.1, session_rng(3, 7))
    b = play_expert(world, SimulatorConfig(), 0.1, session_rng(3, 7))
    assert [t.user_action for t in a.turns] == [t.user_action for t in b.turns]
    assert [t.system_action for t in a.turns] == [t.system_action for t in b.turns]
