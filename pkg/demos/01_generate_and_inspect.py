"""Generate a handful of instances and print what is inside them.

Run:  python3 demos/01_generate_and_inspect.py --n 12 --m 3 --dist clustered
"""

import argparse

import numpy as np

from mmhcvrp import GenConfig, distance_matrix, generate_many


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=10, help="customers per instance")
    ap.add_argument("--m", type=int, default=3, help="vehicles per instance")
    ap.add_argument("--count", type=int, default=3)
    ap.add_argument("--dist", choices=["uniform", "clustered"], default="uniform")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = GenConfig(n_customers=args.n, n_vehicles=args.m, distribution=args.dist)
    instances = generate_many(cfg, args.count, base_seed=args.seed)

    for inst in instances:
        d = distance_matrix(inst)
        total_demand = int(inst.demands.sum())
        fleet_capacity = int(inst.capacities.sum())
        print(f"{inst.id}: {inst.n_customers} customers, {inst.n_vehicles} vehicles")
        print(f"  depot at {np.round(inst.depot, 3).tolist()}")
        print(f"  demands {inst.demands.tolist()} (total {total_demand},"
              f" fleet capacity {fleet_capacity})")
        print(f"  capacities {inst.capacities.tolist()}")
        print(f"  speeds {np.round(inst.speeds, 3).tolist()}")
        print(f"  customer spread: mean pairwise distance"
              f" {d[1:, 1:][np.triu_indices(args.n, k=1)].mean():.3f},"
              f" max depot leg {d[0, 1:].max():.3f}")
        # a single vehicle serving everything needs at least this many reloads
        reloads = int(np.ceil(total_demand / inst.capacities.max())) - 1
        print(f"  lower bound on reloads for a one-vehicle tour: {reloads}")


if __name__ == "__main__":
    main()
