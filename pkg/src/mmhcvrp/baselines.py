"""Reference solvers: an exact enumerator for tiny instances and two
seeded heuristics (simulated annealing, genetic) for gap computation.

The exact solver is a two-stage dynamic program: per vehicle, the optimal
duration to serve every customer subset (state = served set, current
customer, load since the last reload, with reload transitions through the
depot); then a min-max partition of the customer set across vehicles by
subset enumeration.  Both stages are exhaustive, so the result is a true
lower bound for every feasible solution.

Routes in this module are per-vehicle node lists where 0 marks a mid-route
reload, matching the Solution convention.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InternalError, ValidationError
from .mdp import Solution, evaluate_solution
from .problem import Instance, distance_matrix

EXACT_MAX_CUSTOMERS = 8
EXACT_MAX_VEHICLES = 3


@dataclass(frozen=True)
class SearchBudget:
    """Stopping rule for the heuristics; at least one limit must be set."""

    max_iterations: int | None = None
    max_seconds: float | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.max_iterations is None and self.max_seconds is None:
            raise ValidationError("a search budget needs max_iterations or max_seconds")
        if self.max_iterations is not None and self.max_iterations < 0:
            raise ValidationError("max_iterations must be >= 0")
        if self.max_seconds is not None and self.max_seconds <= 0:
            raise ValidationError("max_seconds must be positive")


def _make_solution(instance: Instance, routes: Sequence[Sequence[int]], dist: np.ndarray) -> Solution:
    """Build a Solution with leg-by-leg duration math and revalidate it."""
    durations = []
    for i, route in enumerate(routes):
        t = 0.0
        pos = 0
        for j in route:
            t = t + dist[pos, j] / instance.speeds[i]
            pos = j
        t = t + dist[pos, 0] / instance.speeds[i]
        durations.append(float(t))
    objective = float(max(durations))
    solution = Solution(
        instance_id=instance.id,
        routes=tuple(tuple(int(j) for j in r) for r in routes),
        objective=objective,
        durations=tuple(durations),
    )
    check = evaluate_solution(instance, solution.routes, dist)
    if check != objective:
        raise InternalError("duration bookkeeping diverged from the reference evaluator")
    return solution


# ---------------------------------------------------------------------------
# Exact solver
# ---------------------------------------------------------------------------

def _single_vehicle_costs(instance: Instance, dist: np.ndarray, vehicle: int):
    """Optimal duration for this vehicle to serve each customer subset.

    Returns (f, route_builder): f[mask] is the optimal round-trip duration
    serving exactly `mask`, and route_builder(mask) reconstructs one optimal
    route (with reload markers) for it.
    """
    n = instance.n_customers
    rho = int(instance.capacities[vehicle])
    chi = float(instance.speeds[vehicle])
    demands = [0] + [int(d) for d in instance.demands]
    full = 1 << n
    inf = np.inf

    # value[mask][last] -> (rho+1,) times; parent arrays mirror the layout.
    value = [[None] * (n + 1) for _ in range(full)]
    par_last = [[None] * (n + 1) for _ in range(full)]
    par_load = [[None] * (n + 1) for _ in range(full)]
    par_kind = [[None] * (n + 1) for _ in range(full)]  # 0 start, 1 direct, 2 reload

    def ensure(mask: int, last: int):
        if value[mask][last] is None:
            value[mask][last] = np.full(rho + 1, inf)
            par_last[mask][last] = np.full(rho + 1, -1, dtype=np.int16)
            par_load[mask][last] = np.full(rho + 1, -1, dtype=np.int16)
            par_kind[mask][last] = np.zeros(rho + 1, dtype=np.uint8)
        return value[mask][last]

    for c in range(1, n + 1):
        d = demands[c]
        if d <= rho:
            arr = ensure(1 << (c - 1), c)
            arr[d] = dist[0, c] / chi

    for mask in range(1, full):
        for last in range(1, n + 1):
            src = value[mask][last]
            if src is None:
                continue
            finite = np.isfinite(src)
            if not finite.any():
                continue
            best_load = int(np.argmin(src))
            best_val = src[best_load]
            for c in range(1, n + 1):
                bit = 1 << (c - 1)
                if mask & bit:
                    continue
                d = demands[c]
                if d > rho:
                    continue
                nm = mask | bit
                tgt = ensure(nm, c)
                # travel straight to c with the current load
                cand = src[: rho + 1 - d] + dist[last, c] / chi
                view = tgt[d:]
                better = cand < view
                if better.any():
                    view[better] = cand[better]
                    par_last[nm][c][d:][better] = last
                    par_load[nm][c][d:][better] = np.flatnonzero(better)
                    par_kind[nm][c][d:][better] = 1
                # reload at the depot on the way
                cand_r = best_val + (dist[last, 0] + dist[0, c]) / chi
                if cand_r < tgt[d]:
                    tgt[d] = cand_r
                    par_last[nm][c][d] = last
                    par_load[nm][c][d] = best_load
                    par_kind[nm][c][d] = 2

    f = np.full(full, inf)
    end_state = [None] * full
    f[0] = 0.0
    for mask in range(1, full):
        for last in range(1, n + 1):
            src = value[mask][last]
            if src is None:
                continue
            totals = src + dist[last, 0] / chi
            load = int(np.argmin(totals))
            if totals[load] < f[mask]:
                f[mask] = totals[load]
                end_state[mask] = (last, load)

    def route_builder(mask: int) -> list[int]:
        if mask == 0:
            return []
        if end_state[mask] is None:
            raise InternalError("route reconstruction for an infeasible subset")
        last, load = end_state[mask]
        rev: list[int] = []
        while True:
            kind = int(par_kind[mask][last][load])
            rev.append(last)
            if kind == 2:
                rev.append(0)
            pl = int(par_last[mask][last][load])
            pload = int(par_load[mask][last][load])
            mask ^= 1 << (last - 1)
            if pl == -1:
                if mask:
                    raise InternalError("route reconstruction lost customers")
                break
            last, load = pl, pload
        return rev[::-1]

    return f, route_builder


def exact_small(instance: Instance) -> tuple[float, Solution]:
    """Provably optimal min-max solution for tiny instances.

    Guarded to N <= 8 customers and M <= 3 vehicles; beyond that the subset
    spaces are too large for an exact sweep.
    """
    n, m = instance.n_customers, instance.n_vehicles
    if n > EXACT_MAX_CUSTOMERS or m > EXACT_MAX_VEHICLES:
        raise ValidationError(
            f"exact_small handles at most {EXACT_MAX_CUSTOMERS} customers "
            f"and {EXACT_MAX_VEHICLES} vehicles, got N={n}, M={m}"
        )
    dist = distance_matrix(instance)
    full = (1 << n) - 1
    per_vehicle = [_single_vehicle_costs(instance, dist, v) for v in range(m)]

    # assign[v][mask]: min-max duration for vehicles 0..v-1 serving `mask`
    assign = np.full((m + 1, full + 1), np.inf)
    assign[0, 0] = 0.0
    choice = np.full((m + 1, full + 1), -1, dtype=np.int64)
    for v in range(1, m + 1):
        fv = per_vehicle[v - 1][0]
        for mask in range(full + 1):
            sub = mask
            while True:
                rest = assign[v - 1, mask ^ sub]
                cand = max(rest, fv[sub]) if np.isfinite(rest) and np.isfinite(fv[sub]) else np.inf
                if cand < assign[v, mask]:
                    assign[v, mask] = cand
                    choice[v, mask] = sub
                if sub == 0:
                    break
                sub = (sub - 1) & mask
    if not np.isfinite(assign[m, full]):
        raise InternalError("no feasible fleet assignment found")

    routes: list[list[int]] = []
    mask = full
    for v in range(m, 0, -1):
        sub = int(choice[v, mask])
        routes.append(per_vehicle[v - 1][1](sub))
        mask ^= sub
    routes.reverse()
    solution = _make_solution(instance, routes, dist)
    return solution.objective, solution


# ---------------------------------------------------------------------------
# Shared heuristic pieces
# ---------------------------------------------------------------------------

def nearest_feasible_routes(instance: Instance, dist: np.ndarray) -> list[list[int]]:
    """Greedy construction: the least-busy vehicle repeatedly takes the
    customer it can reach fastest, reloading when nothing fits its free
    capacity."""
    n, m = instance.n_customers, instance.n_vehicles
    caps = instance.capacities
    speeds = instance.speeds
    unserved = set(range(1, n + 1))
    routes: list[list[int]] = [[] for _ in range(m)]
    pos = [0] * m
    used = [0] * m
    clock = [0.0] * m
    active = [True] * m

    while unserved:
        pick = -1
        for i in range(m):
            if active[i] and (pick < 0 or clock[i] < clock[pick]):
                pick = i
        if pick < 0:
            raise InternalError("construction stalled with unserved customers")
        i = pick
        servable = [c for c in unserved if instance.demands[c - 1] <= caps[i]]
        if not servable:
            active[i] = False
            continue
        fits = [c for c in servable if instance.demands[c - 1] + used[i] <= caps[i]]
        if not fits:
            clock[i] += dist[pos[i], 0] / speeds[i]
            routes[i].append(0)
            pos[i] = 0
            used[i] = 0
            continue
        c = min(fits, key=lambda c: (dist[pos[i], c], c))
        clock[i] += dist[pos[i], c] / speeds[i]
        routes[i].append(c)
        pos[i] = c
        used[i] += int(instance.demands[c - 1])
        unserved.remove(c)
    return routes


def _strip_markers(route: list[int]) -> list[int]:
    """Drop depot markers that separate nothing: leading, trailing, doubled."""
    out: list[int] = []
    for j in route:
        if j == 0 and (not out or out[-1] == 0):
            continue
        out.append(j)
    while out and out[-1] == 0:
        out.pop()
    return out


def _segments_feasible(route: Sequence[int], demands: np.ndarray, capacity: int) -> bool:
    load = 0
    for j in route:
        if j == 0:
            load = 0
        else:
            load += int(demands[j - 1])
            if load > capacity:
                return False
    return True


def _route_duration(route: Sequence[int], dist: np.ndarray, speed: float) -> float:
    t = 0.0
    pos = 0
    for j in route:
        t += dist[pos, j] / speed
        pos = j
    return t + dist[pos, 0] / speed


class _BudgetClock:
    def __init__(self, budget: SearchBudget):
        budget.validate()
        self.budget = budget
        self.start = time.perf_counter()
        self.iterations = 0

    def spent(self) -> bool:
        b = self.budget
        if b.max_iterations is not None and self.iterations >= b.max_iterations:
            return True
        if b.max_seconds is not None and (self.iterations % 256 == 0):
            return (time.perf_counter() - self.start) >= b.max_seconds
        return False

    def tick(self) -> None:
        self.iterations += 1


# ---------------------------------------------------------------------------
# Simulated annealing
# ---------------------------------------------------------------------------

def simulated_annealing(instance: Instance, budget: SearchBudget) -> Solution:
    """Local search over explicit routes with geometric cooling.

    Moves: relocate a customer to another route (auto-inserting a reload
    when the receiving segment would overflow), swap two customers, reverse
    a stretch within one route, and move a customer across a reload segment
    of its own route.  Worse candidates are accepted with probability
    exp(-delta/T), T cooling by 0.995 per iteration from a tenth of the
    starting objective.
    """
    clockb = _BudgetClock(budget)
    rng = np.random.default_rng(budget.seed)
    dist = distance_matrix(instance)
    n, m = instance.n_customers, instance.n_vehicles
    demands = instance.demands
    caps = [int(c) for c in instance.capacities]

    routes = [_strip_markers(r) for r in nearest_feasible_routes(instance, dist)]
    durs = [_route_duration(routes[i], dist, instance.speeds[i]) for i in range(m)]
    cur_obj = max(durs)
    best_routes = [list(r) for r in routes]
    best_obj = cur_obj

    temp = cur_obj / 10.0

    def customer_positions():
        out = []
        for i, r in enumerate(routes):
            out.extend((i, p) for p, j in enumerate(r) if j != 0)
        return out

    while not clockb.spent():
        clockb.tick()
        kind = int(rng.integers(4))
        changed: dict[int, list[int]] = {}

        if kind == 0 and m >= 2:  # relocate between routes
            positions = customer_positions()
            if not positions:
                temp *= 0.995
                continue
            a, p = positions[int(rng.integers(len(positions)))]
            b = int(rng.integers(m - 1))
            if b >= a:
                b += 1
            c = routes[a][p]
            if demands[c - 1] > caps[b]:
                temp *= 0.995
                continue
            ra = _strip_markers(routes[a][:p] + routes[a][p + 1 :])
            rb = list(routes[b])
            q = int(rng.integers(len(rb) + 1))
            rb.insert(q, c)
            if not _segments_feasible(rb, demands, caps[b]):
                rb.insert(q, 0)
                rb = _strip_markers(rb)
            if not _segments_feasible(rb, demands, caps[b]):
                temp *= 0.995
                continue
            changed = {a: ra, b: rb}
        elif kind == 1:  # swap two customers
            positions = customer_positions()
            if len(positions) < 2:
                temp *= 0.995
                continue
            i1, i2 = rng.choice(len(positions), size=2, replace=False)
            (a, p), (b, q) = positions[int(i1)], positions[int(i2)]
            ra, rb = list(routes[a]), list(routes[b])
            if a == b:
                ra[p], ra[q] = ra[q], ra[p]
                changed = {a: ra}
            else:
                ra[p], rb[q] = rb[q], ra[p]
                changed = {a: ra, b: rb}
        elif kind == 2:  # reverse a stretch within one route
            cands = [i for i in range(m) if len(routes[i]) >= 2]
            if not cands:
                temp *= 0.995
                continue
            a = cands[int(rng.integers(len(cands)))]
            r = routes[a]
            p = int(rng.integers(len(r) - 1))
            q = int(rng.integers(p + 1, len(r)))
            ra = _strip_markers(r[:p] + r[p : q + 1][::-1] + r[q + 1 :])
            changed = {a: ra}
        else:  # move a customer into a different reload segment of its route
            cands = [i for i in range(m) if 0 in routes[i]]
            if not cands:
                temp *= 0.995
                continue
            a = cands[int(rng.integers(len(cands)))]
            r = routes[a]
            marks = [p for p, j in enumerate(r) if j == 0]
            cust = [p for p, j in enumerate(r) if j != 0]
            p = cust[int(rng.integers(len(cust)))]
            seg_of = sum(1 for q in marks if q < p)
            c = r[p]
            rest = r[:p] + r[p + 1 :]
            seg_count = rest.count(0) + 1
            if seg_count < 2:
                temp *= 0.995
                continue
            tgt = int(rng.integers(seg_count - 1))
            if tgt >= seg_of:
                tgt += 1
            lo = 0 if tgt == 0 else [q + 1 for q, j in enumerate(rest) if j == 0][tgt - 1]
            hi = len(rest) if tgt == seg_count - 1 else [q for q, j in enumerate(rest) if j == 0][tgt]
            q = int(rng.integers(lo, hi + 1))
            ra = _strip_markers(rest[:q] + [c] + rest[q:])
            changed = {a: ra}

        ok = all(_segments_feasible(r, demands, caps[i]) for i, r in changed.items())
        if not ok:
            temp *= 0.995
            continue
        new_durs = list(durs)
        for i, r in changed.items():
            new_durs[i] = _route_duration(r, dist, instance.speeds[i])
        cand_obj = max(new_durs)
        delta = cand_obj - cur_obj
        accept = delta <= 0
        if not accept and temp > 0:
            ratio = delta / temp
            accept = ratio < 700 and rng.random() < math.exp(-ratio)
        if accept:
            for i, r in changed.items():
                routes[i] = r
            durs = new_durs
            cur_obj = cand_obj
            if cur_obj < best_obj:
                best_obj = cur_obj
                best_routes = [list(r) for r in routes]
        temp *= 0.995

    return _make_solution(instance, best_routes, dist)


# ---------------------------------------------------------------------------
# Genetic algorithm
# ---------------------------------------------------------------------------

def _split_tour(
    tour: Sequence[int],
    instance: Instance,
    dist: np.ndarray,
) -> tuple[float, list[list[int]]]:
    """Deterministic min-max split of a giant tour into per-vehicle routes.

    Cuts the tour into consecutive blocks and assigns them to vehicles by
    dynamic programming over (prefix length, used-vehicle subset).  Block
    costs use greedy reload insertion in tour order.
    """
    n = len(tour)
    m = instance.n_vehicles
    demands = instance.demands
    caps = [int(c) for c in instance.capacities]
    speeds = instance.speeds

    cost = np.full((m, n + 1, n + 1), np.inf)
    for v in range(m):
        for i in range(n):
            load = 0
            t = 0.0
            pos = 0
            feasible = True
            for j in range(i, n):
                c = tour[j]
                d = int(demands[c - 1])
                if d > caps[v]:
                    feasible = False
                if not feasible:
                    break
                if load + d > caps[v]:
                    t += dist[pos, 0]
                    pos = 0
                    load = 0
                t += dist[pos, c]
                load += d
                pos = c
                cost[v, i, j + 1] = (t + dist[c, 0]) / speeds[v]

    full = (1 << m) - 1
    h = np.full((n + 1, full + 1), np.inf)
    h[0, 0] = 0.0
    pick = {}
    for mask in range(1, full + 1):
        for v in range(m):
            if not mask & (1 << v):
                continue
            prev = mask ^ (1 << v)
            for j in range(n + 1):
                if h[j, prev] < h[j, mask]:
                    h[j, mask] = h[j, prev]
                    pick[(j, mask)] = (v, j)
                lim = h[j, mask]
                for i in range(j):
                    base = h[i, prev]
                    if not np.isfinite(base):
                        continue
                    cand = max(base, cost[v, i, j])
                    if cand < lim:
                        h[j, mask] = cand
                        pick[(j, mask)] = (v, i)
                        lim = cand
    if not np.isfinite(h[n, full]):
        raise InternalError("giant-tour split found no feasible assignment")

    routes: list[list[int]] = [[] for _ in range(m)]
    j, mask = n, full
    while mask:
        v, i = pick[(j, mask)]
        if i < j:
            load = 0
            route: list[int] = []
            for idx in range(i, j):
                c = tour[idx]
                d = int(demands[c - 1])
                if load + d > caps[v]:
                    route.append(0)
                    load = 0
                route.append(c)
                load += d
            routes[v] = route
        mask ^= 1 << v
        j = i
    return float(h[n, full]), routes


def _order_crossover(p1: Sequence[int], p2: Sequence[int], rng: np.random.Generator) -> list[int]:
    n = len(p1)
    if n < 2:
        return list(p1)
    a = int(rng.integers(n))
    b = int(rng.integers(n))
    if a > b:
        a, b = b, a
    child: list[int | None] = [None] * n
    child[a : b + 1] = p1[a : b + 1]
    taken = set(p1[a : b + 1])
    fill = [c for c in list(p2[b + 1 :]) + list(p2[: b + 1]) if c not in taken]
    idx = 0
    for pos in list(range(b + 1, n)) + list(range(a)):
        child[pos] = fill[idx]
        idx += 1
    return [int(c) for c in child]


def genetic(
    instance: Instance,
    budget: SearchBudget,
    population: int = 32,
    elite: int = 2,
    mutation_rate: float = 0.2,
    tournament: int = 3,
) -> Solution:
    """Giant-tour genetic search: order crossover, swap mutation, elitism.

    The budget's max_iterations counts fitness evaluations; the initial
    population is always evaluated so a zero budget still returns the best
    constructed individual.
    """
    if population < 4:
        raise ValidationError("population must be >= 4")
    if elite < 1 or elite >= population:
        raise ValidationError("elite must be in 1..population-1")
    clockb = _BudgetClock(budget)
    rng = np.random.default_rng(budget.seed)
    dist = distance_matrix(instance)
    n = instance.n_customers

    def fitness(tour: tuple[int, ...]) -> float:
        return _split_tour(tour, instance, dist)[0]

    pop: list[tuple[int, ...]] = []
    identity = tuple(range(1, n + 1))
    pop.append(identity)
    while len(pop) < population:
        pop.append(tuple(int(c) for c in rng.permutation(n) + 1))
    scored = [(fitness(t), t) for t in pop]
    for _ in scored:
        clockb.tick()
    best_fit, best_tour = min(scored, key=lambda s: (s[0], s[1]))

    while not clockb.spent():
        scored.sort(key=lambda s: (s[0], s[1]))
        nxt = scored[:elite]
        while len(nxt) < population and not clockb.spent():
            pick1 = min((scored[int(i)] for i in rng.integers(len(scored), size=tournament)),
                        key=lambda s: (s[0], s[1]))
            pick2 = min((scored[int(i)] for i in rng.integers(len(scored), size=tournament)),
                        key=lambda s: (s[0], s[1]))
            child = _order_crossover(pick1[1], pick2[1], rng)
            if n >= 2 and rng.random() < mutation_rate:
                a, b = rng.choice(n, size=2, replace=False)
                child[a], child[b] = child[b], child[a]
            child_t = tuple(child)
            fit = fitness(child_t)
            clockb.tick()
            nxt.append((fit, child_t))
            if fit < best_fit:
                best_fit, best_tour = fit, child_t
        scored = nxt

    _, routes = _split_tour(best_tour, instance, dist)
    return _make_solution(instance, routes, dist)
