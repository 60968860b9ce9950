"""Agenda-based user simulator working at the dialog-act level.

The agenda is a stack of ``(domain, phase)`` items.  Per domain the phases
are pushed so that constraints come before requests, which come before
booking; the first domain of ``goal.domains_order`` sits on top.  Each turn
the user speaks about the top item, plus answers to system requests.
Constraints are stated a few at a time, and booking details may come along
with the first of them, so a system that books as soon as it can may book
an entity the user has not finished describing.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .ontology import GENERAL, NONE, DialogAct, DomainError, Ontology, UserGoal

INFORM, REQUEST, BOOK = "inform", "request", "book"


class SimulatorUsageError(RuntimeError):
    pass


@dataclass
class SimulatorConfig:
    max_turns: int = 40
    p_fail: float = 0.3
    abandon_prob: float = 0.0
    patience: int = 3  # non-progress turns before abandonment is considered
    inform_chunk: int = 2  # at most this many new constraints stated per turn
    early_book_prob: float = 0.5  # chance booking details come with the first constraints


@dataclass
class UserState:
    goal: UserGoal
    agenda: list[tuple[str, str]]
    rng: object
    informed: dict[tuple[str, str], str] = field(default_factory=dict)
    booked: dict[str, str] = field(default_factory=dict)
    book_told: dict[str, set] = field(default_factory=dict)
    stated: dict[str, set] = field(default_factory=dict)
    failed_active: dict[str, bool] = field(default_factory=dict)
    turn_count: int = 0
    terminal: bool = False
    satisfied: bool = False
    stall: int = 0
    history: list = field(default_factory=list)

    def active_constraints(self, domain: str) -> dict[str, str]:
        if self.failed_active.get(domain):
            return self.goal.failed[domain]
        return self.goal.domains[domain].constraints

    def pending_acts(self) -> list[DialogAct]:
        """The agenda flattened into the user acts it still holds."""
        acts = []
        for dom, phase in reversed(self.agenda):
            g = self.goal.domains[dom]
            if phase == INFORM:
                acts += [DialogAct(dom, INFORM, s, v) for s, v in self.active_constraints(dom).items()]
            elif phase == REQUEST:
                acts += [DialogAct(dom, REQUEST, s, NONE) for s in g.requests if (dom, s) not in self.informed]
            else:
                acts += [DialogAct(dom, INFORM, s, v) for s, v in g.book.items()]
        return acts


class AgendaSimulator:
    def __init__(self, ontology: Ontology, config: SimulatorConfig | None = None):
        self.ontology = ontology
        self.config = config or SimulatorConfig()

    def reset(self, goal: UserGoal, rng) -> tuple[UserState, list[DialogAct]]:
        goal.validate(self.ontology)
        agenda = []
        for dom in reversed(goal.domains_order):
            g = goal.domains[dom]
            if g.book:
                agenda.append((dom, BOOK))
            if g.requests:
                agenda.append((dom, REQUEST))
            agenda.append((dom, INFORM))
        state = UserState(goal, agenda, rng, failed_active={d: True for d in goal.failed})
        state.book_told = {d: set() for d in goal.domains}
        state.stated = {d: set() for d in goal.domains}
        action = self._speak(state, [])
        state.history.append(action)
        return state, action

    def step(self, state: UserState, system_action) -> tuple[UserState, list[DialogAct], bool]:
        if state.terminal:
            raise SimulatorUsageError("step() called on a terminated session")
        state.turn_count += 1
        goal = state.goal
        progress = False
        answers = []
        swapped = set()
        top = state.agenda[-1] if state.agenda else None

        for act in system_action:
            dom = act.domain
            if dom not in goal.domains:
                continue
            g = goal.domains[dom]
            if act.intent == INFORM and act.slot in g.requests and act.value != NONE:
                if (dom, act.slot) not in state.informed:
                    progress = True
                state.informed[(dom, act.slot)] = act.value
            elif act.intent == "nooffer" and state.failed_active.get(dom):
                # only the values that changed need restating
                final = g.constraints
                state.stated[dom] = {k for k in state.stated[dom] if final[k] == goal.failed[dom][k]}
                state.failed_active[dom] = False
                swapped.add(dom)
                progress = True
            elif act.intent == REQUEST:
                if act.slot in g.book:
                    answers.append(DialogAct(dom, INFORM, act.slot, g.book[act.slot]))
                    if act.slot not in state.book_told[dom]:
                        progress = True
                    state.book_told[dom].add(act.slot)
                else:
                    cons = state.active_constraints(dom)
                    if act.slot in cons:
                        answers.append(DialogAct(dom, INFORM, act.slot, cons[act.slot]))
                        state.stated[dom].add(act.slot)

        for act in system_action:
            dom = act.domain
            if (act.intent == BOOK and dom in goal.domains and goal.domains[dom].book
                    and act.value != NONE and dom not in state.booked
                    and state.book_told[dom] >= set(goal.domains[dom].book)):
                state.booked[dom] = act.value
                progress = True

        # retire finished agenda items from the top
        if top is not None and top[1] == INFORM and state.agenda and state.agenda[-1] == top:
            # a domain that just switched goals re-states its final constraints first
            dom = top[0]
            done = state.stated[dom] >= set(state.active_constraints(dom))
            if done and not state.failed_active.get(dom) and dom not in swapped:
                state.agenda.pop()
                progress = True
        while state.agenda:
            dom, phase = state.agenda[-1]
            g = goal.domains[dom]
            if phase == REQUEST and all((dom, s) in state.informed for s in g.requests):
                state.agenda.pop()
            elif phase == BOOK and dom in state.booked:
                state.agenda.pop()
            else:
                break

        state.stall = 0 if progress else state.stall + 1
        cfg = self.config
        if not state.agenda:
            state.terminal = True
            state.satisfied = True
            action = [DialogAct(GENERAL, "bye", NONE, NONE)]
        elif state.turn_count >= cfg.max_turns:
            state.terminal = True
            action = [DialogAct(GENERAL, "bye", NONE, NONE)]
        elif (cfg.abandon_prob > 0 and state.stall >= cfg.patience
              and state.rng.random() < cfg.abandon_prob):
            state.terminal = True
            action = [DialogAct(GENERAL, "bye", NONE, NONE)]
        else:
            action = self._speak(state, answers)
        state.history.append(action)
        return state, action, state.terminal

    def _speak(self, state: UserState, answers: list[DialogAct]) -> list[DialogAct]:
        dom, phase = state.agenda[-1]
        g = state.goal.domains[dom]
        acts = list(answers)
        if phase == INFORM:
            cons = state.active_constraints(dom)
            todo = [s for s in cons if s not in state.stated[dom]]
            if todo:
                first = not state.stated[dom]
                k = 1 + int(state.rng.integers(min(len(todo), self.config.inform_chunk)))
                state.stated[dom].update(todo[:k])
                acts += [DialogAct(dom, INFORM, s, cons[s]) for s in todo[:k]]
                if (first and g.book and not state.book_told[dom]
                        and state.rng.random() < self.config.early_book_prob):
                    state.book_told[dom].update(g.book)
                    acts += [DialogAct(dom, INFORM, s, v) for s, v in g.book.items()]
            else:
                acts += [DialogAct(dom, INFORM, s, v) for s, v in cons.items()]
        elif phase == REQUEST:
            acts += [DialogAct(dom, REQUEST, s, NONE) for s in g.requests if (dom, s) not in state.informed]
        else:
            told = state.book_told[dom]
            if not told:
                # volunteer a random nonempty subset of the booking details
                slots = list(g.book)
                k = 1 + int(state.rng.integers(len(slots)))
                told.update(slots[i] for i in sorted(state.rng.permutation(len(slots))[:k]))
            elif state.stall > 0 and not answers:
                missing = [s for s in g.book if s not in told]
                if missing:
                    told.add(missing[0])
            acts += [DialogAct(dom, INFORM, s, g.book[s]) for s in g.book if s in told]
        out, seen = [], set()
        for a in acts:
            if a not in seen:
                seen.add(a)
                out.append(a)
        return out


def check_goal(ontology: Ontology, goal: UserGoal) -> None:
    try:
        goal.validate(ontology)
    except DomainError as e:
        raise SimulatorUsageError(str(e)) from e
