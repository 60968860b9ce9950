"""Train the four variants over several seeds and print the comparison table.

    python3 scripts/run_directional.py --seeds 5 --iterations 300 --out results/directional
"""
import argparse
import json
import logging
from dataclasses import replace
from pathlib import Path

from gdpl.experiments import VARIANTS, grid_table, pooled_returns, run_grid, write_grid
from gdpl.trainer import TrainConfig


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", help="base experiment config (JSON)")
    p.add_argument("--algos", nargs="+", default=list(VARIANTS))
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--iterations", type=int, default=300)
    p.add_argument("--eval-episodes", type=int, default=1000)
    p.add_argument("--out", default="results/directional")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    base = TrainConfig.load(args.config) if args.config else TrainConfig()
    base = replace(base, iterations=args.iterations, eval_episodes=args.eval_episodes).validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs = run_grid(base, args.algos, range(args.seeds), out)
    write_grid(runs, out / "grid.json")

    print(f"{'variant':<18}{'success':>9}{'inform F1':>11}{'match':>8}{'turns':>8}{'KL':>8}")
    for algo, row in grid_table(runs).items():
        print(f"{algo:<18}{row['success']:>9.3f}{row['inform_f1']:>11.3f}{row['match']:>8.3f}"
              f"{row['turns']:>8.2f}{row['kl_turns']:>8.3f}")
    if "gdpl" in runs:
        print("gdpl returns by outcome:", json.dumps(pooled_returns(runs["gdpl"]), indent=1))


if __name__ == "__main__":
    main()
