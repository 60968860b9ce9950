"""Multi-seed comparison of algorithm variants and the reward-trace check.

Used by the acceptance tests and by ``scripts/run_directional.py``.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .corpus import generate_corpus
from .ontology import World
from .trainer import TrainConfig, load_world, run_experiment

log = logging.getLogger(__name__)

VARIANTS = ("gdpl", "ppo-handcrafted", "gdpl-sess", "gdpl-discr")


def run_grid(base: TrainConfig, algos=VARIANTS, seeds=range(5), out_dir=None, world: World | None = None,
             corpus=None) -> dict:
    """Train every (algo, seed) pair from ``base``; returns {algo: {seed: run}}.

    A run keeps the evaluation summary, the per-iteration history and the
    trainer.  All runs share one world and one demonstration corpus.
    """
    world = world or load_world(base)
    if corpus is None:
        corpus, _ = generate_corpus(base.corpus_sessions, world, base.sim_config, base.expert_epsilon,
                                    base.corpus_seed)
    runs = {a: {} for a in algos}
    for algo in algos:
        for seed in seeds:
            t0 = time.time()
            config = replace(base, algo=algo, seed=seed).validate()
            out = Path(out_dir) / f"{algo}-seed{seed}" if out_dir is not None else None
            res = run_experiment(config, out, world, corpus)
            res["history"] = res["trainer"].history
            res["seconds"] = time.time() - t0
            runs[algo][seed] = res
            s = res["summary"]
            log.info("%s seed %d: success %.3f inform F1 %.3f turns %.2f KL %.3f (%.0fs)", algo, seed,
                     s["success"], s["inform_f1"], s["turns"], s["kl_turns"], res["seconds"])
    return runs


def mean_over_seeds(runs: dict, key: str) -> dict:
    return {algo: float(np.mean([r["summary"][key] for r in by_seed.values()])) for algo, by_seed in runs.items()}


def pooled_returns(by_seed: dict) -> dict:
    """Session-weighted mean return of full-score and other sessions, pooled over seeds."""
    out = {}
    for metric in ("inform", "match", "success"):
        tot = {"full": [0.0, 0], "other": [0.0, 0]}
        for r in by_seed.values():
            rep = r["summary"]["returns"][metric]
            for g in ("full", "other"):
                tot[g][0] += rep[f"{g}_mean"] * rep[f"{g}_num"]
                tot[g][1] += rep[f"{g}_num"]
        out[metric] = {f"{g}_mean": (s / n if n else float("nan")) for g, (s, n) in tot.items()}
        out[metric].update({f"{g}_num": n for g, (_, n) in tot.items()})
    return out


def thirds(trace) -> tuple[float, float]:
    """Mean of the first and of the last ceil(T/3) entries."""
    k = math.ceil(len(trace) / 3)
    return float(np.mean(trace[:k])), float(np.mean(trace[-k:]))


def grid_table(runs: dict) -> dict:
    keys = ("success", "inform_f1", "match", "turns", "kl_turns")
    return {algo: {k: float(np.mean([r["summary"][k] for r in by_seed.values()])) for k in keys}
            for algo, by_seed in runs.items()}


def write_grid(runs: dict, path) -> None:
    rows = {algo: {str(seed): {k: r["summary"][k] for k in ("success", "inform_f1", "match", "turns", "kl_turns")}
                   for seed, r in by_seed.items()} for algo, by_seed in runs.items()}
    doc = {"per_seed": rows, "mean": grid_table(runs)}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
