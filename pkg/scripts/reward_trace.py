"""Print the per-turn reward of one successful multi-domain session under a trained checkpoint.

    python3 scripts/reward_trace.py results/directional/gdpl-seed0/checkpoint --expert
"""
import argparse

from gdpl import evaluate
from gdpl.cli import _load_trainer, pick_trace_session
from gdpl.experiments import thirds


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--expert", action="store_true", help="trace the scripted expert instead of the policy")
    p.add_argument("--min-domains", type=int, default=2)
    p.add_argument("--out", default="trace.tsv")
    args = p.parse_args()

    tr = _load_trainer(args.checkpoint)
    session = pick_trace_session(tr, args.seed, args.expert, args.min_domains)
    rhat = evaluate.trace_export(session, tr.estimator, tr.policy, args.out, tr.world.ontology, tr.reward_offset())
    for t, (turn, r) in enumerate(zip(session.turns, rhat)):
        sys_acts = " ".join(f"{a.domain}-{a.intent}-{a.slot}" for a in turn.system_action)
        print(f"{t:>3} {r:>9.3f}  {sys_acts}")
    first, last = thirds(rhat)
    print(f"first-third mean {first:.3f}, final-third mean {last:.3f}; rows written to {args.out}")


if __name__ == "__main__":
    main()
