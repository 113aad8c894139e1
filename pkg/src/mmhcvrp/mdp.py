"""Decision process for min-max fleet routing.

One (vehicle, node) pair is chosen per step.  Visiting a customer adds its
demand to the vehicle's used capacity and zeroes the customer's remaining
demand; visiting the depot resets used capacity (a reload).  Travel time is
distance divided by the vehicle's speed.  The episode ends once every
customer is served; the final return legs to the depot are charged
analytically by :func:`finalize_reward` instead of consuming extra steps.
The reward is the negative of the longest per-vehicle route duration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FileFormatError, InternalError, ValidationError
from .problem import Instance, distance_matrix

SOLUTION_FORMAT_VERSION = 1


@dataclass(frozen=True)
class Action:
    """Vehicle ``i`` (0-based) moves to node ``j`` (0 = depot)."""

    vehicle: int
    node: int


@dataclass(frozen=True)
class FleetState:
    """Dynamic rollout state; treat as a value, ``step`` returns a new one.

    ``used_capacity``/``clock``/``last_node`` are per-vehicle, ``remaining``
    is per-node with index 0 (the depot) always zero.  ``history`` records
    the actions taken so far, for route assembly at finalization.
    """

    instance: Instance
    dist: np.ndarray
    used_capacity: np.ndarray
    clock: np.ndarray
    last_node: np.ndarray
    remaining: np.ndarray
    step_count: int
    history: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class Solution:
    """Per-vehicle routes plus the evaluated min-max objective.

    Routes list the visited node indices in order, including mid-route depot
    reloads, excluding the implicit start at the depot and the final return.
    """

    instance_id: str
    routes: tuple[tuple[int, ...], ...]
    objective: float
    durations: tuple[float, ...]


def init_state(instance: Instance, dist: np.ndarray | None = None) -> FleetState:
    """Fresh state: all vehicles idle at the depot, all demand outstanding."""
    if dist is None:
        dist = distance_matrix(instance)
    m = instance.n_vehicles
    remaining = np.concatenate([[0], instance.demands]).astype(np.int64)
    return FleetState(
        instance=instance,
        dist=dist,
        used_capacity=np.zeros(m, dtype=np.int64),
        clock=np.zeros(m, dtype=np.float64),
        last_node=np.zeros(m, dtype=np.int64),
        remaining=remaining,
        step_count=0,
        history=(),
    )


def is_terminal(state: FleetState) -> bool:
    return not np.any(state.remaining[1:])


def action_mask(state: FleetState) -> np.ndarray:
    """Boolean (M, N+1) feasibility grid, True = selectable.

    A pair (i, j) is infeasible when the customer is already served, when a
    depot-located vehicle re-selects the depot, or when the vehicle's free
    capacity cannot cover the customer's remaining demand.
    """
    if is_terminal(state):
        raise ValidationError("action_mask called on a terminal state")
    inst = state.instance
    free = inst.capacities - state.used_capacity
    mask = free[:, None] >= state.remaining[None, :]
    served = state.remaining == 0
    served[0] = False
    mask[:, served] = False
    mask[state.last_node == 0, 0] = False
    return mask


def step(state: FleetState, action: Action) -> FleetState:
    """Apply one unmasked action; raises on masked or out-of-range actions."""
    i, j = action.vehicle, action.node
    m, n = state.instance.n_vehicles, state.instance.n_customers
    if not (0 <= i < m and 0 <= j <= n):
        raise ValidationError(f"action ({i}, {j}) out of range for M={m}, N={n}")
    if not action_mask(state)[i, j]:
        raise ValidationError(f"action ({i}, {j}) is masked in the current state")

    used = state.used_capacity.copy()
    clock = state.clock.copy()
    last = state.last_node.copy()
    remaining = state.remaining.copy()

    used[i] = 0 if j == 0 else used[i] + remaining[j]
    clock[i] = clock[i] + state.dist[last[i], j] / state.instance.speeds[i]
    last[i] = j
    remaining[j] = 0
    return FleetState(
        instance=state.instance,
        dist=state.dist,
        used_capacity=used,
        clock=clock,
        last_node=last,
        remaining=remaining,
        step_count=state.step_count + 1,
        history=state.history + ((i, j),),
    )


def routes_from_history(history: Sequence[tuple[int, int]], n_vehicles: int) -> tuple[tuple[int, ...], ...]:
    routes: list[list[int]] = [[] for _ in range(n_vehicles)]
    for i, j in history:
        routes[i].append(j)
    return tuple(tuple(r) for r in routes)


def finalize_reward(state: FleetState) -> tuple[float, Solution]:
    """Charge each vehicle's return leg, then reward = -max route duration."""
    if not is_terminal(state):
        raise ValidationError("finalize_reward called on a non-terminal state")
    inst = state.instance
    clock = state.clock.copy()
    for i in range(inst.n_vehicles):
        clock[i] = clock[i] + state.dist[state.last_node[i], 0] / inst.speeds[i]
    objective = float(np.max(clock))
    solution = Solution(
        instance_id=inst.id,
        routes=routes_from_history(state.history, inst.n_vehicles),
        objective=objective,
        durations=tuple(float(c) for c in clock),
    )
    return -objective, solution


def evaluate_solution(instance: Instance, routes: Sequence[Sequence[int]], dist: np.ndarray | None = None) -> float:
    """Validate routes and return the min-max objective.

    Checks that every customer appears exactly once across all routes, that
    node indices are known, and that the load between consecutive depot
    visits never exceeds the vehicle's capacity.  Leg sums follow visit
    order so the result matches the incremental clock of a rollout exactly.
    """
    if len(routes) != instance.n_vehicles:
        raise ValidationError(
            f"expected {instance.n_vehicles} routes, got {len(routes)}"
        )
    if dist is None:
        dist = distance_matrix(instance)
    n = instance.n_customers
    visited = np.zeros(n + 1, dtype=np.int64)
    durations = np.zeros(instance.n_vehicles, dtype=np.float64)

    for i, route in enumerate(routes):
        load = 0
        pos = 0
        total = 0.0
        for j in route:
            j = int(j)
            if not 0 <= j <= n:
                raise ValidationError(f"vehicle {i} visits unknown node index {j}")
            if j == 0:
                load = 0
            else:
                if visited[j]:
                    raise ValidationError(f"customer {j} visited more than once")
                visited[j] = 1
                load += int(instance.demands[j - 1])
                if load > int(instance.capacities[i]):
                    raise ValidationError(
                        f"vehicle {i} exceeds capacity {int(instance.capacities[i])} "
                        f"at customer {j} (load {load})"
                    )
            total = total + dist[pos, j] / instance.speeds[i]
            pos = j
        total = total + dist[pos, 0] / instance.speeds[i]
        durations[i] = total

    unserved = np.nonzero(visited[1:] == 0)[0] + 1
    if unserved.size:
        raise ValidationError(f"customers never visited: {unserved.tolist()}")
    return float(np.max(durations))


def rollout_step_budget(instance: Instance) -> int:
    """Upper bound on episode length: N customer visits plus M*N reloads."""
    return instance.n_customers + instance.n_vehicles * instance.n_customers


def random_rollout(instance: Instance, rng: np.random.Generator) -> tuple[float, Solution]:
    """Sample uniformly among unmasked pairs until terminal; testing aid."""
    state = init_state(instance)
    budget = rollout_step_budget(instance)
    while not is_terminal(state):
        if state.step_count > budget:
            raise InternalError("rollout exceeded its termination bound")
        mask = action_mask(state)
        pairs = np.argwhere(mask)
        if pairs.size == 0:
            raise InternalError("no feasible action in a reachable non-terminal state")
        i, j = pairs[rng.integers(len(pairs))]
        state = step(state, Action(int(i), int(j)))
    return finalize_reward(state)


# ---------------------------------------------------------------------------
# Solution files
# ---------------------------------------------------------------------------

def solution_to_dict(solution: Solution) -> dict:
    return {
        "format_version": SOLUTION_FORMAT_VERSION,
        "instance_id": solution.instance_id,
        "objective": float(solution.objective),
        "routes": [list(r) for r in solution.routes],
        "durations": [float(d) for d in solution.durations],
    }


def solution_from_dict(data: dict) -> Solution:
    if not isinstance(data, dict):
        raise FileFormatError("solution record must be a JSON object")
    if data.get("format_version") != SOLUTION_FORMAT_VERSION:
        raise FileFormatError(f"unsupported solution format_version {data.get('format_version')!r}")
    try:
        return Solution(
            instance_id=str(data["instance_id"]),
            routes=tuple(tuple(int(j) for j in r) for r in data["routes"]),
            objective=float(data["objective"]),
            durations=tuple(float(d) for d in data["durations"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FileFormatError(f"malformed solution record: {exc}") from exc


def write_solution(solution: Solution, path: str | Path) -> None:
    Path(path).write_text(json.dumps(solution_to_dict(solution), indent=2) + "\n", encoding="utf-8")


def read_solution(path: str | Path) -> Solution:
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise FileFormatError(f"cannot read solution file {path}: {exc}") from exc
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"solution file {path} is not valid JSON: {exc}") from exc
    return solution_from_dict(data)
