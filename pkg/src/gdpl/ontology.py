"""Multi-domain ontology, entity database and user-goal sampling.

Everything here is immutable after construction.  Acts in policy space carry
the count placeholder as value; concrete values only appear at the
simulator/evaluator boundary.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import NamedTuple

import numpy as np

SCHEMA_VERSION = 1
PLACEHOLDER = "#"
NONE = "none"
GENERAL = "general"

# relative frequency of 1-, 2- and 3-domain goals
DOMAIN_COUNT_WEIGHTS = (310, 528, 162)


class DomainError(ValueError):
    """Raised on anything inconsistent with the ontology."""


class DialogAct(NamedTuple):
    domain: str
    intent: str
    slot: str = NONE
    value: str = PLACEHOLDER

    def delex(self) -> "DialogAct":
        return self._replace(value=PLACEHOLDER)

    @property
    def is_delex(self) -> bool:
        return self.value == PLACEHOLDER


@dataclass(frozen=True)
class DomainSpec:
    name: str
    informable: tuple[str, ...]
    requestable: tuple[str, ...]
    book_slots: tuple[str, ...] = ()
    values: dict[str, tuple[str, ...]] = field(default_factory=dict, compare=False, hash=False)

    @property
    def bookable(self) -> bool:
        return bool(self.book_slots)

    @property
    def slots(self) -> tuple[str, ...]:
        """All slots in a stable order: constraints, book slots, request-only slots."""
        seen = list(self.informable) + list(self.book_slots)
        return tuple(seen + [s for s in self.requestable if s not in seen])


@dataclass(frozen=True)
class IntentSpec:
    name: str
    takes_slot: bool
    needs_booking: bool = False


DEFAULT_INTENTS = (
    IntentSpec("inform", True),
    IntentSpec("request", True),
    IntentSpec("nooffer", False),
    IntentSpec("offer", False),
    IntentSpec("book", False, needs_booking=True),
)
DEFAULT_GENERAL_INTENTS = ("reqmore", "bye")


def legal_acts(domains, intents, general_intents) -> list[DialogAct]:
    acts = []
    for d in domains:
        for it in intents:
            if it.needs_booking and not d.bookable:
                continue
            if it.takes_slot:
                acts.extend(DialogAct(d.name, it.name, s) for s in d.slots)
            else:
                acts.append(DialogAct(d.name, it.name))
    acts.extend(DialogAct(GENERAL, g) for g in general_intents)
    return acts


class Ontology:
    """Domains, intents and the fixed act vocabulary (index = vector position)."""

    def __init__(self, domains, intents=DEFAULT_INTENTS, general_intents=DEFAULT_GENERAL_INTENTS,
                 act_vocabulary=None):
        if not domains:
            raise DomainError("ontology has no domains")
        self.domains: tuple[DomainSpec, ...] = tuple(domains)
        self.intents = tuple(intents)
        self.general_intents = tuple(general_intents)
        self._domain = {d.name: d for d in self.domains}
        if len(self._domain) != len(self.domains):
            raise DomainError("duplicate domain names")
        for d in self.domains:
            both = set(d.informable) & set(d.book_slots)
            if both:
                raise DomainError(f"{d.name}: slots both constraint and book slot: {sorted(both)}")
        legal = legal_acts(self.domains, self.intents, self.general_intents)
        if act_vocabulary is None:
            vocab = legal
        else:
            vocab = [DialogAct(*a[:3]) for a in act_vocabulary]
            if len(set(vocab)) != len(vocab):
                raise DomainError("duplicate acts in vocabulary")
            if set(vocab) != set(legal):
                raise DomainError("act vocabulary does not match ontology")
        self.act_vocabulary: tuple[DialogAct, ...] = tuple(vocab)
        self._index = {a: i for i, a in enumerate(self.act_vocabulary)}

    def __len__(self):
        return len(self.act_vocabulary)

    @property
    def domain_names(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.domains)

    def domain(self, name: str) -> DomainSpec:
        try:
            return self._domain[name]
        except KeyError:
            raise DomainError(f"unknown domain {name!r}") from None

    def act_to_index(self, act: DialogAct) -> int:
        if not act.is_delex:
            raise DomainError(f"act is lexicalized: {act}")
        try:
            return self._index[act]
        except KeyError:
            raise DomainError(f"act not in vocabulary: {act}") from None

    def index_to_act(self, index: int) -> DialogAct:
        if not 0 <= index < len(self.act_vocabulary):
            raise DomainError(f"act index out of range: {index}")
        return self.act_vocabulary[index]

    def has_act(self, act: DialogAct) -> bool:
        return act.delex() in self._index

    def encode(self, acts) -> np.ndarray:
        """Multi-hot vector over the vocabulary; values are ignored."""
        v = np.zeros(len(self.act_vocabulary))
        for a in acts:
            v[self._index[a.delex()]] = 1.0
        return v

    def decode(self, vector) -> list[DialogAct]:
        return [self.act_vocabulary[i] for i in np.flatnonzero(np.asarray(vector) > 0.5)]

    def to_dict(self) -> dict:
        return {
            "domains": [
                {
                    "name": d.name,
                    "informable": list(d.informable),
                    "requestable": list(d.requestable),
                    "book_slots": list(d.book_slots),
                    "values": {s: list(v) for s, v in d.values.items()},
                }
                for d in self.domains
            ],
            "intents": [
                {"name": i.name, "takes_slot": i.takes_slot, "needs_booking": i.needs_booking}
                for i in self.intents
            ],
            "general_intents": list(self.general_intents),
            "act_vocabulary": [list(a[:3]) for a in self.act_vocabulary],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Ontology":
        domains = [
            DomainSpec(
                d["name"], tuple(d["informable"]), tuple(d["requestable"]), tuple(d.get("book_slots", ())),
                {s: tuple(v) for s, v in d.get("values", {}).items()},
            )
            for d in data["domains"]
        ]
        intents = [IntentSpec(i["name"], i["takes_slot"], i.get("needs_booking", False)) for i in data["intents"]]
        return cls(domains, intents, data["general_intents"], data.get("act_vocabulary"))


class EntityDatabase:
    """Per-domain entity tables with exact-match constraint queries."""

    def __init__(self, ontology: Ontology, tables: dict[str, list[dict[str, str]]]):
        self.ontology = ontology
        self.tables = {d: [dict(e) for e in tables.get(d, [])] for d in ontology.domain_names}
        for dname, rows in self.tables.items():
            spec = ontology.domain(dname)
            for e in rows:
                for slot, value in e.items():
                    if slot == "id":
                        continue
                    allowed = spec.values.get(slot)
                    if allowed is None or value not in allowed:
                        raise DomainError(f"{dname}: entity value {slot}={value!r} not in value set")
        self._by_id = {e["id"]: (d, e) for d, rows in self.tables.items() for e in rows}
        self._cached = lru_cache(maxsize=65536)(self._query)

    def query(self, domain: str, constraints: dict[str, str]) -> list[dict[str, str]]:
        spec = self.ontology.domain(domain)
        for slot in constraints:
            if slot not in spec.informable:
                raise DomainError(f"{domain}: {slot!r} is not informable")
        return list(self._cached(domain, tuple(sorted(constraints.items()))))

    def count(self, domain: str, constraints: dict[str, str]) -> int:
        return len(self._cached(domain, tuple(sorted(
            (s, v) for s, v in constraints.items() if s in self.ontology.domain(domain).informable))))

    def first(self, domain: str, constraints: dict[str, str]):
        hits = self._cached(domain, tuple(sorted(
            (s, v) for s, v in constraints.items() if s in self.ontology.domain(domain).informable)))
        return hits[0] if hits else None

    def _query(self, domain, items):
        return tuple(e for e in self.tables[domain] if all(e.get(s) == v for s, v in items))

    def entity(self, entity_id: str):
        """Return (domain, entity) or None."""
        return self._by_id.get(entity_id)


@dataclass
class DomainGoal:
    constraints: dict[str, str]
    requests: tuple[str, ...] = ()
    book: dict[str, str] = field(default_factory=dict)


@dataclass
class UserGoal:
    domains: dict[str, DomainGoal]
    domains_order: tuple[str, ...]
    # per-domain constraints active until the system reports no result
    failed: dict[str, dict[str, str]] = field(default_factory=dict)

    def validate(self, ontology: Ontology) -> None:
        if not self.domains:
            raise DomainError("goal has no domains")
        if set(self.domains_order) != set(self.domains) or len(self.domains_order) != len(self.domains):
            raise DomainError("domains_order does not match goal domains")
        for name, g in self.domains.items():
            spec = ontology.domain(name)
            if not g.constraints:
                raise DomainError(f"{name}: goal without constraints")
            for s, v in g.constraints.items():
                if s not in spec.informable or v not in spec.values.get(s, ()):
                    raise DomainError(f"{name}: bad constraint {s}={v!r}")
            for s in g.requests:
                if s not in spec.requestable:
                    raise DomainError(f"{name}: {s!r} not requestable")
            for s, v in g.book.items():
                if s not in spec.book_slots:
                    raise DomainError(f"{name}: {s!r} not a book slot")
            if g.book and set(g.book) != set(spec.book_slots):
                raise DomainError(f"{name}: incomplete book requirements")
        for name, fc in self.failed.items():
            if name not in self.domains:
                raise DomainError(f"failed goal for absent domain {name!r}")
            final = self.domains[name].constraints
            if set(fc) != set(final) or fc == final:
                raise DomainError(f"{name}: failed goal must differ from final goal in a constraint value")

    @property
    def n_constraints(self) -> int:
        return sum(len(g.constraints) for g in self.domains.values())

    @property
    def n_requests(self) -> int:
        return sum(len(g.requests) for g in self.domains.values())

    @property
    def n_book(self) -> int:
        return sum(len(g.book) for g in self.domains.values())

    def to_dict(self) -> dict:
        return {
            "domains_order": list(self.domains_order),
            "domains": {
                d: {"constraints": g.constraints, "requests": list(g.requests), "book": g.book}
                for d, g in self.domains.items()
            },
            "failed": self.failed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "UserGoal":
        return cls(
            {d: DomainGoal(dict(g["constraints"]), tuple(g["requests"]), dict(g["book"]))
             for d, g in data["domains"].items()},
            tuple(data["domains_order"]),
            {d: dict(c) for d, c in data.get("failed", {}).items()},
        )


def uniform_goal_stats(ontology: Ontology, constraint_freq=0.5, request_freq=0.4, book_freq=0.5) -> dict:
    return {
        "domain_count_weights": list(DOMAIN_COUNT_WEIGHTS),
        "domains": {
            d.name: {
                "constraints": {s: constraint_freq for s in d.informable},
                "requests": {s: request_freq for s in d.requestable},
                "book": book_freq if d.bookable else 0.0,
            }
            for d in ontology.domains
        },
    }


def check_goal_stats(ontology: Ontology, stats: dict) -> None:
    for d in ontology.domains:
        ds = stats["domains"].get(d.name)
        if ds is None:
            raise DomainError(f"goal stats missing domain {d.name!r}")
        for kind, slots in (("constraints", d.informable), ("requests", d.requestable)):
            for s in slots:
                f = ds[kind].get(s)
                if f is None or not f >= 0:
                    raise DomainError(f"goal stats: {d.name}.{kind}.{s} missing or negative")
    w = stats.get("domain_count_weights", DOMAIN_COUNT_WEIGHTS)
    if any(x < 0 for x in w) or sum(w) <= 0:
        raise DomainError("bad domain_count_weights")


def _pick_weighted(rng, items, weights):
    w = np.asarray(weights, dtype=float)
    return items[int(rng.choice(len(items), p=w / w.sum()))]


def sample_goal(ontology: Ontology, db: EntityDatabase, goal_stats: dict, rng, p_fail: float = 0.0) -> UserGoal:
    """Draw a user goal.

    Slot inclusion probabilities are the frequencies in ``goal_stats`` (capped
    at 1).  Constraint values come from one target entity so the final goal
    is always satisfiable.  With probability ``p_fail`` one domain with at
    least two constraints gets a failed variant with no matching entity.
    """
    if not ontology.domains:
        raise DomainError("empty ontology")
    dstats = goal_stats["domains"]
    eligible = [d.name for d in ontology.domains
                if db.tables[d.name] and any(dstats[d.name]["constraints"].get(s, 0) > 0 for s in d.informable)]
    if not eligible:
        raise DomainError("no domain has a positive-frequency constraint slot")
    weights = goal_stats.get("domain_count_weights", DOMAIN_COUNT_WEIGHTS)
    n = 1 + int(rng.choice(len(weights), p=np.asarray(weights, float) / sum(weights)))
    n = min(n, len(eligible))
    order = tuple(eligible[i] for i in rng.permutation(len(eligible))[:n])

    domains = {}
    for name in order:
        spec = ontology.domain(name)
        st = dstats[name]
        rows = db.tables[name]
        target = rows[int(rng.integers(len(rows)))]
        cfreq = [min(1.0, st["constraints"].get(s, 0.0)) for s in spec.informable]
        chosen = [s for s, f in zip(spec.informable, cfreq) if rng.random() < f]
        if not chosen:
            chosen = [_pick_weighted(rng, spec.informable, cfreq)]
        constraints = {s: target[s] for s in chosen}
        requests = tuple(s for s in spec.requestable
                         if s not in constraints and rng.random() < min(1.0, st["requests"].get(s, 0.0)))
        book = {}
        if spec.bookable and rng.random() < st.get("book", 0.0):
            book = {s: spec.values[s][int(rng.integers(len(spec.values[s])))] for s in spec.book_slots}
        domains[name] = DomainGoal(constraints, requests, book)

    failed = {}
    if p_fail > 0 and rng.random() < p_fail:
        candidates = [d for d in order if len(domains[d].constraints) >= 2]
        if candidates:
            name = candidates[int(rng.integers(len(candidates)))]
            fc = _failed_variant(ontology.domain(name), db, domains[name].constraints, rng)
            if fc is not None:
                failed[name] = fc
    return UserGoal(domains, order, failed)


def _failed_variant(spec: DomainSpec, db: EntityDatabase, constraints, rng):
    slots = list(constraints)
    for i in rng.permutation(len(slots)):
        slot = slots[i]
        for j in rng.permutation(len(spec.values[slot])):
            value = spec.values[slot][j]
            if value == constraints[slot]:
                continue
            trial = dict(constraints, **{slot: value})
            if db.count(spec.name, trial) == 0:
                return trial
    return None


@dataclass
class World:
    """Ontology, database and goal statistics loaded from one file."""

    ontology: Ontology
    db: EntityDatabase
    goal_stats: dict

    def to_dict(self) -> dict:
        out = {"schema_version": SCHEMA_VERSION}
        out.update(self.ontology.to_dict())
        out["database"] = {d: [dict(e) for e in rows] for d, rows in self.db.tables.items()}
        out["goal_stats"] = json.loads(json.dumps(self.goal_stats))
        return out

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, data: dict) -> "World":
        if data.get("schema_version") != SCHEMA_VERSION:
            raise DomainError(f"unsupported schema_version {data.get('schema_version')!r}")
        onto = Ontology.from_dict(data)
        db = EntityDatabase(onto, data["database"])
        stats = data.get("goal_stats") or uniform_goal_stats(onto)
        check_goal_stats(onto, stats)
        return cls(onto, db, stats)

    @classmethod
    def load(cls, path) -> "World":
        return cls.from_dict(json.loads(Path(path).read_text()))


# synthetic three-domain layout: (informable, requestable, book slots, entities)
_DEFAULT_LAYOUT = {
    "restaurant": (
        {"area": 5, "food": 8, "pricerange": 3, "takeaway": 2, "rating": 4},
        ("address", "phone", "postcode", "name"),
        {"people": 8, "day": 7, "time": 6},
        60,
    ),
    "hotel": (
        {"area": 5, "pricerange": 3, "stars": 5, "parking": 2, "internet": 2, "type": 2},
        ("address", "phone", "postcode", "area"),
        {"people": 8, "day": 7, "stay": 5},
        40,
    ),
    "taxi": (
        {"departure": 6, "destination": 6, "leaveat": 4, "arriveby": 4, "size": 3},
        ("cartype", "phone", "price"),
        {},
        36,
    ),
}


def default_world(seed: int = 0, layout=None) -> World:
    """Build the synthetic ontology, its database and uniform goal stats."""
    rng = np.random.default_rng(seed)
    layout = layout or _DEFAULT_LAYOUT
    domains, tables = [], {}
    for name, (inf, req, book, n_ent) in layout.items():
        values = {s: tuple(f"{s}{k}" for k in range(n)) for s, n in inf.items()}
        values.update({s: tuple(f"{s}{k}" for k in range(n)) for s, n in book.items()})
        for s in req:
            if s not in values:
                values[s] = tuple(f"{name}-{s}-{k:03d}" for k in range(n_ent))
        rows = []
        for k in range(n_ent):
            e = {"id": f"{name}-{k:03d}"}
            for s, n in inf.items():
                e[s] = values[s][int(rng.integers(n))]
            for s in req:
                if s not in inf:
                    e[s] = values[s][k]
            rows.append(e)
        domains.append(DomainSpec(name, tuple(inf), tuple(req), tuple(book), values))
        tables[name] = rows
    onto = Ontology(domains)
    return World(onto, EntityDatabase(onto, tables), uniform_goal_stats(onto))
