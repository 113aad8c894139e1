"""Compare the classical solvers head to head on instances small enough
for the exhaustive optimum.

Run:  python3 demos/04_benchmark_solvers.py --count 20 --sa-iters 20000
"""

import argparse
import time

import numpy as np

from mmhcvrp import (
    GenConfig,
    SearchBudget,
    exact_small,
    generate_many,
    genetic,
    random_rollout,
    simulated_annealing,
)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=6)
    ap.add_argument("--m", type=int, default=2)
    ap.add_argument("--count", type=int, default=20)
    ap.add_argument("--sa-iters", type=int, default=20_000)
    ap.add_argument("--ga-evals", type=int, default=1_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    instances = generate_many(GenConfig(n_customers=args.n, n_vehicles=args.m),
                              args.count, base_seed=args.seed)
    rng = np.random.default_rng(args.seed)

    gaps = {"random": [], "sa": [], "ga": []}
    seconds = {"exact": 0.0, "random": 0.0, "sa": 0.0, "ga": 0.0}

    def timed(tag, fn):
        t0 = time.perf_counter()
        res = fn()
        seconds[tag] += time.perf_counter() - t0
        return res

    for i, inst in enumerate(instances):
        opt, _ = timed("exact", lambda: exact_small(inst))
        _, rand_sol = timed("random", lambda: random_rollout(inst, rng))
        sa = timed("sa", lambda: simulated_annealing(
            inst, SearchBudget(max_iterations=args.sa_iters, seed=i)))
        ga = timed("ga", lambda: genetic(
            inst, SearchBudget(max_iterations=args.ga_evals, seed=i)))
        gaps["random"].append((rand_sol.objective - opt) / opt)
        gaps["sa"].append((sa.objective - opt) / opt)
        gaps["ga"].append((ga.objective - opt) / opt)

    print(f"{args.count} instances at M={args.m}, N={args.n};"
          f" gaps are relative to the exhaustive optimum\n")
    print(f"{'solver':<8} {'mean gap':>9} {'max gap':>9} {'optimal':>8} {'sec/inst':>9}")
    print(f"{'exact':<8} {'0.00%':>9} {'0.00%':>9} {args.count:>7}/{args.count}"
          f" {seconds['exact'] / args.count:>8.3f}")
    for tag in ("sa", "ga", "random"):
        g = np.array(gaps[tag])
        hits = int((g <= 1e-9).sum())
        print(f"{tag:<8} {g.mean():>9.2%} {g.max():>9.2%} {hits:>7}/{args.count}"
              f" {seconds[tag] / args.count:>8.3f}")


if __name__ == "__main__":
    main()
