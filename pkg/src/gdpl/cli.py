"""Command line entry point: gen-ontology, gen-corpus, train, eval, trace.

Exit codes: 0 success, 1 usage error, 2 validation error, 3 runtime failure.
Verbosity comes from the GDPL_LOG environment variable (DEBUG, INFO, ...).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import evaluate
from .corpus import expert_act, generate_corpus, read_corpus
from .ontology import World, default_world, sample_goal
from .trainer import ALGOS, ConfigError, TrainConfig, Trainer, run_experiment, write_rows

log = logging.getLogger("gdpl")

EVAL_COLUMNS = ("sessions", "turns", "inform_precision", "inform_recall", "inform_f1", "match",
                "success", "short_frac", "long_frac", "kl_turns")


class UsageError(Exception):
    pass


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _workers_default() -> int:
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gdpl", description="Dialog policy learning lab: corpus, training, evaluation.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-ontology", help="write the synthetic ontology and entity database")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    c = sub.add_parser("gen-corpus", help="generate expert demonstrations")
    c.add_argument("--ontology", help="world file from gen-ontology (default: built-in world)")
    c.add_argument("--n", type=int, default=2000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--epsilon", type=float, default=0.1, help="expert imperfection rate")
    c.add_argument("--success-floor", type=float, default=0.9)
    c.add_argument("--workers", type=int, default=_workers_default())
    c.add_argument("--config", help="experiment config supplying simulator settings")
    c.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train one algorithm variant")
    t.add_argument("--config")
    t.add_argument("--algo", choices=ALGOS)
    t.add_argument("--seed", type=int)
    t.add_argument("--ontology")
    t.add_argument("--corpus")
    t.add_argument("--iterations", type=int)
    t.add_argument("--eval-episodes", type=int)
    t.add_argument("--workers", type=int, default=_workers_default(),
                   help="processes for corpus generation when no corpus file is given")
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="evaluate a checkpoint on fresh goals")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--n", type=int, default=1000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--greedy", action="store_true", help="emit acts with probability > 0.5 instead of sampling")
    e.add_argument("--out", help="metrics file (tab separated); printed as JSON when omitted")

    r = sub.add_parser("trace", help="export the per-turn reward trace of one session")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--expert", action="store_true", help="trace a session played by the scripted expert")
    r.add_argument("--min-domains", type=int, default=2)
    r.add_argument("--out", required=True)
    return p


def _load_world(path) -> World:
    if path is None:
        return default_world()
    if not Path(path).exists():
        raise ValidationError(f"ontology file not found: {path}")
    try:
        return World.load(path)
    except (ValueError, KeyError) as e:
        raise ValidationError(f"invalid ontology file {path}: {e}") from e


def _resolve_config(args) -> TrainConfig:
    config = TrainConfig()
    if args.config:
        if not Path(args.config).exists():
            raise ValidationError(f"config file not found: {args.config}")
        config = TrainConfig.load(args.config)
    overrides = {k: v for k, v in (("algo", args.algo), ("seed", args.seed), ("ontology", args.ontology),
                                   ("corpus", args.corpus), ("iterations", args.iterations),
                                   ("eval_episodes", args.eval_episodes)) if v is not None}
    config = replace(config, **overrides)
    for name in ("ontology", "corpus"):
        path = getattr(config, name)
        if path is not None and not Path(path).exists():
            raise ValidationError(f"{name} file not found: {path}")
    return config.validate()


def cmd_gen_ontology(args) -> int:
    world = default_world(args.seed)
    world.save(args.out)
    log.info("wrote ontology seed=%d acts=%d to %s", args.seed, len(world.ontology), args.out)
    return 0


def cmd_gen_corpus(args) -> int:
    if args.n < 1:
        raise ValidationError("--n must be >= 1")
    if not 0 <= args.epsilon <= 1:
        raise ValidationError("--epsilon must lie in [0, 1]")
    world = _load_world(args.ontology)
    config = TrainConfig.load(args.config) if args.config else TrainConfig()
    log.info("gen-corpus n=%d seed=%d epsilon=%g workers=%d", args.n, args.seed, args.epsilon, args.workers)
    _, report = generate_corpus(args.n, world, config.sim_config, args.epsilon, args.seed, args.out,
                                workers=args.workers)
    log.info("expert success %.3f, mean turns %.2f", report["success"], report["mean_turns"])
    print(json.dumps(report, sort_keys=True))
    if report["success"] < args.success_floor:
        log.error("expert success %.3f below floor %.3f", report["success"], args.success_floor)
        return 3
    return 0


def cmd_train(args) -> int:
    config = _resolve_config(args)
    log.info("resolved config: %s", json.dumps(asdict(config), sort_keys=True))
    world = _load_world(config.ontology)
    corpus = None
    if config.corpus is None:
        corpus, _ = generate_corpus(config.corpus_sessions, world, config.sim_config, config.expert_epsilon,
                                    config.corpus_seed, workers=args.workers)
    else:
        corpus = read_corpus(config.corpus, world)

    def progress(rep):
        log.info("iter %d success %.3f turns %.2f J_f %.4f r %.4f", rep["iteration"], rep["success"],
                 rep["turns"], rep["j_f"], rep["mean_reward"])

    out = Path(args.out)
    result = run_experiment(config, out, world, corpus, progress)
    s = result["summary"]
    log.info("final success %.3f inform F1 %.3f match %.3f turns %.2f", s["success"], s["inform_f1"],
             s["match"], s["turns"])
    return 0


def _load_trainer(path) -> Trainer:
    d = Path(path)
    if not (d / "config.json").exists():
        raise ValidationError(f"no checkpoint at {d}")
    config = TrainConfig.load(d / "config.json")
    world = _load_world(config.ontology)
    return Trainer.load(d, world)


def cmd_eval(args) -> int:
    if args.n < 1:
        raise ValidationError("--n must be >= 1")
    tr = _load_trainer(args.checkpoint)
    log.info("eval checkpoint=%s n=%d seed=%d greedy=%s", args.checkpoint, args.n, args.seed, args.greedy)
    sessions, outcomes = tr.evaluate(args.n, args.seed, with_traces=True, greedy=args.greedy)
    summary = evaluate.summarize(outcomes)
    summary["kl_turns"] = evaluate.kl_turns([len(s) for s in sessions], [len(s) for s in tr.corpus],
                                            tr.config.max_turns)
    if args.out:
        write_rows(args.out, [summary], EVAL_COLUMNS)
    print(json.dumps({k: summary[k] for k in EVAL_COLUMNS}, sort_keys=True))
    return 0


def cmd_trace(args) -> int:
    tr = _load_trainer(args.checkpoint)
    session = pick_trace_session(tr, args.seed, args.expert, args.min_domains)
    rhat = evaluate.trace_export(session, tr.estimator, tr.policy, args.out, tr.world.ontology,
                                    tr.reward_offset())
    log.info("trace of %d turns written to %s", len(rhat), args.out)
    return 0


def pick_trace_session(tr: Trainer, seed: int, expert: bool, min_domains: int = 2, tries: int = 1000):
    """First session on a goal with at least ``min_domains`` domains that ends in success."""
    from .corpus import session_rng
    from .trainer import run_policy
    world = tr.world
    for i in range(tries):
        rng = session_rng(seed, i)
        goal = sample_goal(world.ontology, world.db, world.goal_stats, rng, tr.config.p_fail)
        if len(goal.domains) < min_domains:
            continue
        if expert:
            def decide(states, beliefs, user_actions):
                return [(expert_act(world, b, u), None, None) for b, u in zip(beliefs, user_actions)]
            session = tr.env.run([goal], [rng], decide)[0]
        else:
            session = run_policy(tr.policy, tr.env, 1, seed + i)[0]
            if len(session.goal.domains) < min_domains:
                continue
        if evaluate.session_outcome(session, world).success:
            return session
    raise RuntimeError(f"no successful session with {min_domains}+ domains in {tries} tries")


COMMANDS = {"gen-ontology": cmd_gen_ontology, "gen-corpus": cmd_gen_corpus, "train": cmd_train,
            "eval": cmd_eval, "trace": cmd_trace}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("GDPL_LOG", "INFO").upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        if getattr(args, "out", None):
            Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except (ValidationError, ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
