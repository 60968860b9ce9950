"""Session metrics: inform P/R/F1, match rate, success, turn KL, returns and reward traces."""
from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ontology import NONE, World

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("turn", "user_acts", "system_acts", "f", "log_pi", "r_hat")


@dataclass
class SessionOutcome:
    turns: int
    precision: float | None
    recall: float | None
    f1: float | None
    match: float | None
    success: int
    trace: list[float] | None = None
    integrity_warnings: int = 0
    goal: object = field(default=None, repr=False)


def informed_slots(session) -> set[tuple[str, str]]:
    """(domain, slot) pairs the system actually informed with a value."""
    out = set()
    for t in session.turns:
        for a in t.system_action:
            if a.intent == "inform" and a.value != NONE:
                out.add((a.domain, a.slot))
    return out


def inform_f1(session, goal, ontology):
    """(precision, recall, F1) over requestable slot types; all None without requests.

    Informs of slots that are not requestable in their domain are ignored.
    Repeated informs of one slot count once.
    """
    requested = {(d, s) for d, g in goal.domains.items() for s in g.requests}
    if not requested:
        return None, None, None
    informed = {(d, s) for d, s in informed_slots(session)
                if d in ontology.domain_names and s in ontology.domain(d).requestable}
    tp = len(informed & requested)
    precision = tp / len(informed) if informed else 0.0
    recall = tp / len(requested)
    f1 = 2 * precision * recall / (precision + recall) if tp else 0.0
    return precision, recall, f1


def booked_entities(session) -> dict[str, str]:
    out = {}
    for t in session.turns:
        for a in t.system_action:
            if a.intent == "book" and a.value != NONE:
                out[a.domain] = a.value
    return out


def match_rate(session, goal, db):
    """Mean over booking domains of 1[booked entity meets all final constraints]; None without bookings.

    Returns (rate, integrity_warnings).
    """
    domains = [d for d, g in goal.domains.items() if g.book]
    if not domains:
        return None, 0
    booked = booked_entities(session)
    warnings = 0
    scores = []
    for d in domains:
        eid = booked.get(d)
        if eid is None:
            scores.append(0.0)
            continue
        found = db.entity(eid)
        if found is None or found[0] != d:
            warnings += 1
            log.warning("booked entity %r not in %s table", eid, d)
            scores.append(0.0)
            continue
        ent = found[1]
        ok = all(ent.get(s) == v for s, v in goal.domains[d].constraints.items())
        scores.append(1.0 if ok else 0.0)
    return float(np.mean(scores)), warnings


def success_of(recall, match) -> int:
    return int((recall is None or recall == 1.0) and (match is None or match == 1.0))


def session_outcome(session, world: World, trace=None) -> SessionOutcome:
    p, r, f = inform_f1(session, session.goal, world.ontology)
    m, warn = match_rate(session, session.goal, world.db)
    return SessionOutcome(len(session), p, r, f, m, success_of(r, m), trace, warn, session.goal)


def turn_distribution(turns, max_turns=40):
    counts = np.bincount(np.clip(np.asarray(turns, dtype=int), 1, max_turns), minlength=max_turns + 1)[1:]
    return (counts + 1.0) / (counts.sum() + max_turns)


def kl_turns(policy_turns, human_turns, max_turns=40) -> float:
    """KL(pi_turns || p_turns) in nats, add-one smoothed over 1..max_turns."""
    if len(policy_turns) == 0 or len(human_turns) == 0:
        raise ValueError("kl_turns needs at least one session on each side")
    pi = turn_distribution(policy_turns, max_turns)
    p = turn_distribution(human_turns, max_turns)
    return float(np.sum(pi * np.log(pi / p)))


def discounted_return(rewards, gamma) -> float:
    r = np.asarray(rewards, dtype=np.float64)
    return float(np.sum(r * gamma ** np.arange(len(r))))


def return_report(outcomes, gamma=0.99) -> dict:
    """Mean return and count of full-score vs other sessions, per metric."""
    report = {}
    for metric, attr in (("inform", "f1"), ("match", "match"), ("success", "success")):
        full, other = [], []
        for o in outcomes:
            value = getattr(o, attr)
            if value is None:
                continue
            R = discounted_return(o.trace, gamma)
            (full if value == 1 else other).append(R)
        report[metric] = {
            "full_mean": float(np.mean(full)) if full else 0.0, "full_num": len(full),
            "other_mean": float(np.mean(other)) if other else 0.0, "other_num": len(other),
        }
    return report


def summarize(outcomes) -> dict:
    def mean(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else float("nan")

    turns = [o.turns for o in outcomes]
    return {
        "sessions": len(outcomes),
        "turns": mean(turns),
        "inform_precision": mean(o.precision for o in outcomes),
        "inform_recall": mean(o.recall for o in outcomes),
        "inform_f1": mean(o.f1 for o in outcomes),
        "match": mean(o.match for o in outcomes),
        "success": mean(o.success for o in outcomes),
        "short_frac": float(np.mean([t < 3 for t in turns])) if turns else 0.0,
        "long_frac": float(np.mean([t > 11 for t in turns])) if turns else 0.0,
    }


def length_table(outcomes) -> dict:
    """Share and success of short (<3 turns) and long (>11 turns) dialogs."""
    out = {}
    for name, pred in (("short", lambda t: t < 3), ("long", lambda t: t > 11)):
        sel = [o for o in outcomes if pred(o.turns)]
        out[name] = {"count": len(sel), "success": float(np.mean([o.success for o in sel])) if sel else None}
    return out


def _fmt_acts(acts):
    return ";".join("-".join(a[:3]) for a in acts)


def trace_rows(session, f_values, log_probs):
    rows = []
    for t, (turn, fv, lp) in enumerate(zip(session.turns, f_values, log_probs)):
        rows.append((t, _fmt_acts(turn.user_action), _fmt_acts(turn.system_action),
                     f"{fv:.6f}", f"{lp:.6f}", f"{fv - lp:.6f}"))
    return rows


def write_trace(path, rows) -> None:
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            w.writerows(rows)
    except OSError as e:
        raise OSError(f"cannot write trace {path}: {e}") from e


def trace_export(session, estimator, policy, out_path, ontology, offset: float = 0.0) -> list[float]:
    """Write one row per turn with f, log pi and r_hat; returns the r_hat trace.

    ``offset`` is subtracted from f first (the trainer's reward centering).
    """
    if not session.turns:
        write_trace(out_path, [])
        return []
    from .dialog import session_transitions
    from .reward import Transitions
    s, a, sn, term = session_transitions(session, estimator.h.sizes[0], policy.n_acts, ontology)
    batch = Transitions(s, a, sn, term)
    fv = estimator.f(batch) - offset
    lp = policy.log_prob(s, a)
    write_trace(out_path, trace_rows(session, fv, lp))
    return list(fv - lp)


def turn_counter(sessions) -> Counter:
    return Counter(len(s) for s in sessions)
