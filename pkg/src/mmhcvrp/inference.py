"""Greedy and sampling solvers plus benchmark evaluation reports.

Both solvers run the policy with inference-time normalization statistics,
so results do not depend on how instances are batched.  Sampling derives
one rng per sample index from the caller's seed, which makes the best-of-k
result independent of shard size and worker count, and monotone in k for a
fixed seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import InternalError, ValidationError
from .mdp import Solution, evaluate_solution
from .model import ParameterSet
from .problem import Instance
from .training import derive_rng, run_rollouts


def _validated(instance: Instance, solution: Solution) -> Solution:
    check = evaluate_solution(instance, solution.routes)
    if abs(check - solution.objective) > 1e-12 * max(1.0, abs(check)):
        raise InternalError(
            f"solution objective {solution.objective!r} disagrees with re-evaluation {check!r}"
        )
    return solution


def solve_greedy(params: ParameterSet, instance: Instance) -> Solution:
    """Deterministic argmax decode; ties go to the smallest flattened pair index."""
    res = run_rollouts(params, [instance], "greedy", training_bn=False)
    return _validated(instance, res.solutions([instance])[0])


def solve_sampling(
    params: ParameterSet,
    instance: Instance,
    k: int = 1280,
    seed: int = 0,
    shard_size: int = 256,
) -> Solution:
    """Best of k sampled rollouts; sample i draws from the (seed, i) stream.

    Ties keep the smallest sample index, so growing k with the same seed
    never returns a worse solution.
    """
    if k < 1:
        raise ValidationError("k must be >= 1")
    best: Solution | None = None
    best_obj = np.inf
    for lo in range(0, k, shard_size):
        hi = min(lo + shard_size, k)
        lanes = [instance] * (hi - lo)
        rngs = [derive_rng(seed, i) for i in range(lo, hi)]
        res = run_rollouts(params, lanes, "sample", lane_rngs=rngs, training_bn=False)
        pick = int(np.argmin(res.objectives))
        if res.objectives[pick] < best_obj:
            best_obj = float(res.objectives[pick])
            best = res.solutions(lanes)[pick]
    return _validated(instance, best)


@dataclass(frozen=True)
class EvalRow:
    instance_id: str
    objective: float
    gap: float
    seconds: float


@dataclass(frozen=True)
class EvalReport:
    rows: tuple[EvalRow, ...]
    reference_tag: str
    mean_objective: float
    mean_gap: float
    total_seconds: float
    mean_seconds: float


def evaluate_benchmark(
    solver: Callable[[Instance], Solution],
    instances: Sequence[Instance],
    references: Mapping[str, float],
    reference_tag: str = "reference",
    timing: str = "zero",
) -> EvalReport:
    """Run one solver over the set, revalidate every solution, and compute
    gaps against the reference objectives (keyed by instance id)."""
    if timing not in ("zero", "wall"):
        raise ValidationError("timing must be 'zero' or 'wall'")
    rows = []
    for inst in instances:
        if inst.id not in references:
            raise ValidationError(f"no reference objective for instance {inst.id}")
        t0 = time.perf_counter()
        sol = solver(inst)
        secs = (time.perf_counter() - t0) if timing == "wall" else 0.0
        obj = evaluate_solution(inst, sol.routes)
        ref = references[inst.id]
        if not (np.isfinite(ref) and ref > 0):
            raise ValidationError(f"reference objective for {inst.id} must be finite and positive")
        rows.append(EvalRow(
            instance_id=inst.id,
            objective=obj,
            gap=(obj - ref) / ref,
            seconds=secs,
        ))
    n = len(rows)
    if n == 0:
        raise ValidationError("no instances to evaluate")
    total_secs = sum(r.seconds for r in rows)
    return EvalReport(
        rows=tuple(rows),
        reference_tag=reference_tag,
        mean_objective=sum(r.objective for r in rows) / n,
        mean_gap=sum(r.gap for r in rows) / n,
        total_seconds=total_secs,
        mean_seconds=total_secs / n,
    )


def write_report(report: EvalReport, path: str, provenance: str | None = None) -> None:
    """Tab-separated rows with '#' provenance lines and an aggregate footer."""
    with open(path, "w") as f:
        if provenance:
            f.write(f"# config: {provenance}\n")
        f.write(f"# reference: {report.reference_tag}\n")
        f.write("instance_id\tobj\tgap\tseconds\n")
        for r in report.rows:
            f.write(f"{r.instance_id}\t{r.objective:.6f}\t{r.gap:.6f}\t{r.seconds:.6f}\n")
        f.write(f"# aggregate\tmean_obj={report.mean_objective:.6f}"
                f"\tmean_gap={report.mean_gap:.6f}"
                f"\ttotal_seconds={report.total_seconds:.6f}"
                f"\tmean_seconds={report.mean_seconds:.6f}\n")
