"""Walk one episode of the fleet MDP by hand and watch the action mask evolve.

Picks the feasible (vehicle, node) pair with the shortest travel time at each
step, which is a reasonable myopic heuristic and easy to follow in the log.

Run:  python3 demos/02_rollout_and_masks.py --n 8 --m 2 --seed 4
"""

import argparse

import numpy as np

from mmhcvrp import (
    Action,
    GenConfig,
    action_mask,
    distance_matrix,
    evaluate_solution,
    finalize_reward,
    generate_many,
    init_state,
    is_terminal,
    step,
)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=8)
    ap.add_argument("--m", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    inst = generate_many(GenConfig(n_customers=args.n, n_vehicles=args.m),
                         1, base_seed=args.seed)[0]
    dist = distance_matrix(inst)
    state = init_state(inst)
    print(f"{inst.id}: demands {inst.demands.tolist()},"
          f" capacities {inst.capacities.tolist()},"
          f" speeds {np.round(inst.speeds, 3).tolist()}")

    t = 0
    while not is_terminal(state):
        mask = action_mask(state)
        # travel time for every feasible pair; inf elsewhere
        times = dist[state.last_node] / inst.speeds[:, None]
        times = np.where(mask, times, np.inf)
        v, j = np.unravel_index(np.argmin(times), times.shape)
        what = "reload at depot" if j == 0 else f"serve customer {j} (demand {inst.demands[j - 1]})"
        print(f"step {t:2d}: {int(mask.sum()):2d} feasible pairs;"
              f" vehicle {v} ({state.used_capacity[v]}/{inst.capacities[v]} used)"
              f" -> {what}")
        state = step(state, Action(vehicle=int(v), node=int(j)))
        t += 1

    reward, sol = finalize_reward(state)
    obj = evaluate_solution(inst, sol.routes)
    print("\nroutes:")
    for i, r in enumerate(sol.routes):
        print(f"  vehicle {i}: depot -> {' -> '.join(map(str, r)) or '(idle)'} -> depot,"
              f" duration {sol.durations[i]:.4f}")
    print(f"min-max objective (independent re-evaluation): {obj:.6f}")
    assert abs(obj + reward) < 1e-12  # reward is the negated objective


if __name__ == "__main__":
    main()
