"""System-side dialog state tracking at the dialog-act level.

State vector layout (see docs/state-layout.md)::

    [ user acts (|V|) | previous system acts (|V|) | belief | query buckets ]

belief, per domain in ontology order:
    one filled flag per constraint slot, then per book slot,
    one pending flag per requestable slot,
    one booked flag if the domain is bookable.
query buckets, per domain: one-hot over result counts {0, 1, 2-3, >=4}.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ontology import NONE, DialogAct, EntityDatabase, Ontology

N_BUCKETS = 4


def count_bucket(n: int) -> int:
    if n <= 1:
        return n
    return 2 if n <= 3 else 3


@dataclass
class DomainBelief:
    constraints: dict[str, str] = field(default_factory=dict)
    book: dict[str, str] = field(default_factory=dict)
    pending: set[str] = field(default_factory=set)
    booked: str | None = None


@dataclass
class BeliefState:
    domains: dict[str, DomainBelief]
    unknown_acts: int = 0

    @classmethod
    def empty(cls, ontology: Ontology) -> "BeliefState":
        return cls({d: DomainBelief() for d in ontology.domain_names})

    def copy(self) -> "BeliefState":
        return BeliefState(
            {d: DomainBelief(dict(b.constraints), dict(b.book), set(b.pending), b.booked)
             for d, b in self.domains.items()},
            self.unknown_acts,
        )

    def snapshot(self) -> dict:
        return {
            d: {"constraints": b.constraints, "book": b.book,
                "pending": sorted(b.pending), "booked": b.booked}
            for d, b in self.domains.items()
        }


def update(ontology: Ontology, belief: BeliefState, action, side: str) -> BeliefState:
    """Fold one party's acts into a new belief state."""
    new = belief.copy()
    for act in action:
        if act.domain not in new.domains or not ontology.has_act(act):
            if act.domain != "general":
                new.unknown_acts += 1
            continue
        spec = ontology.domain(act.domain)
        b = new.domains[act.domain]
        if side == "user":
            if act.intent == "inform":
                if act.slot in spec.informable:
                    b.constraints[act.slot] = act.value
                elif act.slot in spec.book_slots:
                    b.book[act.slot] = act.value
            elif act.intent == "request" and act.slot in spec.requestable:
                b.pending.add(act.slot)
        else:
            if act.intent == "inform" and act.value != NONE:
                b.pending.discard(act.slot)
            elif act.intent == "book" and act.value != NONE:
                b.booked = act.value
    return new


class StateEncoder:
    """Maps (belief, user action, previous system action) to the state vector."""

    def __init__(self, ontology: Ontology, db: EntityDatabase):
        self.ontology = ontology
        self.db = db
        n = len(ontology)
        self.user_offset = 0
        self.sys_offset = n
        self.belief_offset = 2 * n
        self.slot_index: dict[tuple[str, str, str], int] = {}
        i = self.belief_offset
        for d in ontology.domains:
            for s in d.informable + d.book_slots:
                self.slot_index[(d.name, "filled", s)] = i
                i += 1
            for s in d.requestable:
                self.slot_index[(d.name, "pending", s)] = i
                i += 1
            if d.bookable:
                self.slot_index[(d.name, "booked", "")] = i
                i += 1
        self.query_offset = i
        self.dim = i + N_BUCKETS * len(ontology.domains)

    @staticmethod
    def expected_dim(ontology: Ontology) -> int:
        belief = sum(len(d.informable) + len(d.book_slots) + len(d.requestable) + int(d.bookable)
                     for d in ontology.domains)
        return 2 * len(ontology) + belief + N_BUCKETS * len(ontology.domains)

    def vectorize(self, belief: BeliefState, user_action, prev_system_action) -> np.ndarray:
        onto = self.ontology
        v = np.zeros(self.dim)
        for a in user_action:
            if onto.has_act(a):
                v[self.user_offset + onto.act_to_index(a.delex())] = 1.0
        for a in prev_system_action:
            if onto.has_act(a):
                v[self.sys_offset + onto.act_to_index(a.delex())] = 1.0
        for k, d in enumerate(onto.domains):
            b = belief.domains[d.name]
            for s in list(b.constraints) + list(b.book):
                v[self.slot_index[(d.name, "filled", s)]] = 1.0
            for s in b.pending:
                v[self.slot_index[(d.name, "pending", s)]] = 1.0
            if d.bookable and b.booked is not None:
                v[self.slot_index[(d.name, "booked", "")]] = 1.0
            n = self.db.count(d.name, b.constraints)
            v[self.query_offset + N_BUCKETS * k + count_bucket(n)] = 1.0
        return v


def lexicalize(ontology: Ontology, db: EntityDatabase, belief: BeliefState, action) -> list[DialogAct]:
    """Fill delexicalized system acts with values from the entity the belief selects.

    Informs and offers take values from the first matching entity; a booking
    succeeds only with a matching entity and every book slot known.  Anything
    that cannot be filled carries ``none``.
    """
    out = []
    for a in action:
        if a.domain not in belief.domains:
            out.append(a._replace(value=NONE))
            continue
        b = belief.domains[a.domain]
        ent = db.first(a.domain, b.constraints)
        value = NONE
        if a.intent == "inform" and ent is not None:
            value = ent.get(a.slot, b.constraints.get(a.slot, b.book.get(a.slot, NONE)))
        elif a.intent == "offer" and ent is not None:
            value = ent["id"]
        elif a.intent == "book" and ent is not None:
            if set(b.book) >= set(ontology.domain(a.domain).book_slots):
                value = ent["id"]
        out.append(DialogAct(a.domain, a.intent, a.slot, value))
    return out
