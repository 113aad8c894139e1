"""Symmetry augmentation, batched rollouts, and REINFORCE training.

The rollout engine drives many episodes in lockstep with numpy-batched
forwards.  Finished lanes are compacted out of the active set each step, so
one slow episode never pads the rest.  When log-probabilities are
requested the decode loop is built from differentiable primitives and the
previously selected vehicle's embedding stays in the graph across steps.

Augmentation produces eight variants per instance: the eight axis
reflections of the unit square paired with sampled vehicle permutations.
Variant 0 is always the untouched instance.  The shared baseline for
REINFORCE is the mean reward across one instance's variants.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .errors import InternalError, NumericError, ValidationError
from .mdp import Solution, rollout_step_budget
from .model import (
    ModelConfig,
    ParameterSet,
    action_log_probabilities,
    edge_features_for,
    encode_nodes_batch,
    encode_vehicles_batch,
    init_parameters,
    pair_logits_batch,
    pfca_update_batch,
    save_checkpoint,
    vehicle_attributes,
)
from .numerics import AdjointTape, Tensor
from .problem import GenConfig, Instance, distance_matrix, generate_many

N_NODE_TRANSFORMS = 8

# Seed-stream tags: keep the per-purpose streams disjoint.
_SEED_GEN, _SEED_AUG, _SEED_ACT, _SEED_EVAL, _SEED_INIT = 1, 2, 3, 4, 5


def derive_rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def derive_seed(*key: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def node_transform(coords: np.ndarray, index: int) -> np.ndarray:
    """Apply one of the eight unit-square reflections to (..., 2) coordinates."""
    if not 0 <= index < N_NODE_TRANSFORMS:
        raise ValidationError(f"node transform index {index} out of range 0..7")
    x, y = coords[..., 0], coords[..., 1]
    table = (
        (x, y), (y, x),
        (x, 1.0 - y), (y, 1.0 - x),
        (1.0 - x, y), (1.0 - y, x),
        (1.0 - x, 1.0 - y), (1.0 - y, 1.0 - x),
    )
    a, b = table[index]
    return np.stack([a, b], axis=-1)


@dataclass(frozen=True)
class AugmentedVariant:
    """One augmented copy of a base instance.

    vehicle_permutation maps the variant's vehicle index to the base
    vehicle index it inherited attributes from.
    """

    instance: Instance
    base_id: str
    transform_index: int
    vehicle_permutation: tuple[int, ...]


@dataclass(frozen=True)
class AugmentedBatch:
    """B x K variants, instance-major, with back-references to the bases."""

    base_instances: tuple[Instance, ...]
    variants: tuple[AugmentedVariant, ...]
    k: int

    def groups(self) -> list[tuple[AugmentedVariant, ...]]:
        return [self.variants[i * self.k : (i + 1) * self.k] for i in range(len(self.base_instances))]


def augment_instance(
    instance: Instance,
    k: int = 8,
    seed: int | None = None,
    rng: np.random.Generator | None = None,
    vehicle_augment: bool = True,
) -> list[AugmentedVariant]:
    """K variants: node reflection index = variant index, plus a sampled
    vehicle permutation (identity on variant 0, and everywhere when vehicle
    augmentation is disabled).   Duplicate permutations are expected when
    M! < K."""
    if k < 1 or k > N_NODE_TRANSFORMS:
        raise ValidationError(f"k must be in 1..{N_NODE_TRANSFORMS}, got {k}")
    if rng is None:
        rng = np.random.default_rng(seed)
    m = instance.n_vehicles
    out = []
    for v in range(k):
        if v == 0 or not vehicle_augment:
            perm = np.arange(m)
        else:
            perm = rng.permutation(m)
        variant = Instance(
            depot=tuple(node_transform(np.asarray(instance.depot, dtype=np.float64), v)),
            coords=node_transform(instance.coords, v),
            demands=instance.demands.copy(),
            capacities=instance.capacities[perm],
            speeds=instance.speeds[perm],
            id=f"{instance.id}-aug{v}",
            distribution=instance.distribution,
        )
        out.append(AugmentedVariant(
            instance=variant,
            base_id=instance.id,
            transform_index=v,
            vehicle_permutation=tuple(int(i) for i in perm),
        ))
    return out


def augment_batch(
    instances: Sequence[Instance],
    k: int,
    rng: np.random.Generator,
    vehicle_augment: bool = True,
) -> AugmentedBatch:
    variants: list[AugmentedVariant] = []
    for inst in instances:
        variants.extend(augment_instance(inst, k=k, rng=rng, vehicle_augment=vehicle_augment))
    return AugmentedBatch(base_instances=tuple(instances), variants=tuple(variants), k=k)


def map_routes_through_permutation(
    routes: Sequence[Sequence[int]], permutation: Sequence[int]
) -> tuple[tuple[int, ...], ...]:
    """Reindex per-vehicle routes so variant vehicle i drives the base route
    of the base vehicle it inherited attributes from."""
    return tuple(tuple(routes[permutation[i]]) for i in range(len(permutation)))


# ---------------------------------------------------------------------------
# Batched rollout engine
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Trajectory:
    """One episode: the actions taken, their log-probabilities, and the reward."""

    instance: Instance
    actions: tuple[tuple[int, int], ...]
    step_log_probs: tuple[float, ...]
    reward: float
    objective: float
    solution: Solution


@dataclass
class RolloutResult:
    objectives: np.ndarray            # (B,) float64
    rewards: np.ndarray               # (B,) float64
    durations: np.ndarray             # (B, M) float64, return legs included
    actions: list[list[int]]          # flat vehicle*S+node indices per lane
    routes: list[tuple[tuple[int, ...], ...]]
    total_log_prob: Tensor | None     # (B,) in model dtype, graph-connected
    step_log_probs: list[list[float]] | None

    def solutions(self, instances: Sequence[Instance]) -> list[Solution]:
        return [
            Solution(
                instance_id=inst.id,
                routes=self.routes[i],
                objective=float(self.objectives[i]),
                durations=tuple(float(v) for v in self.durations[i]),
            )
            for i, inst in enumerate(instances)
        ]


class _Env:
    """Vectorized episode state for a batch of same-shape instances."""

    def __init__(self, instances: Sequence[Instance]):
        first = instances[0]
        m, n = first.n_vehicles, first.n_customers
        for inst in instances:
            if inst.n_vehicles != m or inst.n_customers != n:
                raise ValidationError("batched rollouts need a uniform (vehicles, customers) shape")
        self.instances = list(instances)
        self.b, self.m, self.s = len(instances), m, n + 1
        self.coords = np.stack([inst.all_coords() for inst in instances])
        self.demands = np.zeros((self.b, self.s), dtype=np.int64)
        self.demands[:, 1:] = np.stack([inst.demands for inst in instances])
        self.capacities = np.stack([inst.capacities for inst in instances])
        self.speeds = np.stack([inst.speeds for inst in instances])
        self.dist = np.stack([distance_matrix(inst) for inst in instances])
        self.used = np.zeros((self.b, self.m), dtype=np.int64)
        self.clock = np.zeros((self.b, self.m), dtype=np.float64)
        self.last = np.zeros((self.b, self.m), dtype=np.int64)
        self.remaining = self.demands.copy()

    def feasible(self, lanes: np.ndarray) -> np.ndarray:
        """(A, M, S) boolean mask for the given lane indices."""
        rem = self.remaining[lanes]                      # (A, S)
        free = self.capacities[lanes] - self.used[lanes]  # (A, M)
        feas = np.zeros((len(lanes), self.m, self.s), dtype=bool)
        feas[:, :, 0] = self.last[lanes] != 0
        open_customer = rem[:, None, 1:] > 0
        fits = free[:, :, None] >= rem[:, None, 1:]
        feas[:, :, 1:] = open_customer & fits
        return feas

    def apply(self, lanes: np.ndarray, veh: np.ndarray, node: np.ndarray) -> None:
        ln = self.last[lanes, veh]
        self.clock[lanes, veh] += self.dist[lanes, ln, node] / self.speeds[lanes, veh]
        at_depot = node == 0
        new_used = self.used[lanes, veh] + np.where(at_depot, 0, self.remaining[lanes, node])
        self.used[lanes, veh] = np.where(at_depot, 0, new_used)
        self.remaining[lanes, node] = np.where(at_depot, self.remaining[lanes, node], 0)
        self.last[lanes, veh] = node

    def done(self) -> np.ndarray:
        return (self.remaining[:, 1:] == 0).all(axis=1)

    def final_durations(self) -> np.ndarray:
        """(B, M) per-vehicle totals including the return leg to the depot."""
        back = self.dist[np.arange(self.b)[:, None], self.last, 0] / self.speeds
        return self.clock + np.where(self.last != 0, back, 0.0)


def run_rollouts(
    params: ParameterSet,
    instances: Sequence[Instance],
    mode: str,
    lane_rngs: Sequence[np.random.Generator] | None = None,
    forced_actions: Sequence[Sequence[int]] | None = None,
    training_bn: bool = False,
    update_running: bool = False,
    want_log_prob: bool = False,
    record_step_log_probs: bool = False,
) -> RolloutResult:
    """Roll a batch of episodes to termination.

    mode: "greedy" (argmax, ties to the smallest flattened index), "sample"
    (one categorical draw per active lane per step from that lane's rng), or
    "replay" (forced flat actions, used for gradient passes).
    """
    if mode not in ("greedy", "sample", "replay"):
        raise ValidationError(f"unknown rollout mode {mode!r}")
    if mode == "sample" and (lane_rngs is None or len(lane_rngs) != len(instances)):
        raise ValidationError("sample mode needs one rng per lane")
    if mode == "replay" and (forced_actions is None or len(forced_actions) != len(instances)):
        raise ValidationError("replay mode needs one action list per lane")

    cfg = params.config
    env = _Env(instances)
    b, m, s = env.b, env.m, env.s
    dt = params.dtype

    edge_raw = None
    if cfg.dual_modality:
        edge_raw = np.stack([
            edge_features_for(inst, cfg, env.dist[i]) for i, inst in enumerate(env.instances)
        ])
    node_emb = encode_nodes_batch(
        params, env.coords, env.demands.astype(np.float64), edge_raw,
        training=training_bn, update_running=update_running,
    )

    actions: list[list[int]] = [[] for _ in range(b)]
    step_lp: list[list[float]] | None = [[] for _ in range(b)] if record_step_log_probs else None
    total_logp: Tensor | None = None
    m_prev: Tensor | None = None
    prev_active: np.ndarray | None = None
    budget = rollout_step_budget(env.instances[0])
    cursor = np.zeros(b, dtype=np.int64)

    done = env.done()
    steps = 0
    while not done.all():
        if steps > budget:
            raise InternalError("rollout exceeded its step budget; mask logic is broken")
        active = np.flatnonzero(~done)
        node_act = nx.gather_rows(node_emb, active)
        if m_prev is not None:
            keep = np.searchsorted(prev_active, active)
            m_prev = nx.gather_rows(m_prev, keep)

        attrs = vehicle_attributes(
            env.speeds[active], env.capacities[active], env.used[active],
            env.clock[active], cfg.attr_scale,
        )
        served = np.zeros((len(active), s), dtype=bool)
        served[:, 1:] = env.remaining[active][:, 1:] == 0
        veh_emb = encode_vehicles_batch(params, node_act, attrs, env.last[active], served)

        node_hat = pfca_update_batch(node_act, m_prev) if cfg.pfca else node_act
        feas = env.feasible(active)
        logits = pair_logits_batch(veh_emb, node_hat, feas, cfg.logit_clip)

        if want_log_prob or record_step_log_probs:
            logp_flat = action_log_probabilities(logits)
            probs = np.exp(logp_flat.data)
        else:
            logp_flat = None
            flat_data = logits.data.reshape(len(active), m * s).astype(np.float64)
            mx = flat_data.max(axis=1, keepdims=True)
            z = np.exp(flat_data - mx)
            probs = z / z.sum(axis=1, keepdims=True)

        if mode == "greedy":
            chosen = np.argmax(probs, axis=1)
        elif mode == "sample":
            chosen = np.empty(len(active), dtype=np.int64)
            for pos, lane in enumerate(active):
                u = lane_rngs[lane].random()
                cdf = np.cumsum(probs[pos])
                idx = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
                idx = min(idx, m * s - 1)
                while probs[pos, idx] <= 0.0:  # never select a masked pair off a rounding edge
                    idx -= 1
                chosen[pos] = idx
        else:
            chosen = np.array([forced_actions[lane][cursor[lane]] for lane in active], dtype=np.int64)
        cursor[active] += 1

        veh = chosen // s
        node = chosen % s
        if not feas[np.arange(len(active)), veh, node].all():
            raise InternalError("selected an infeasible vehicle-node pair")

        if want_log_prob:
            picked = nx.pick_per_row(logp_flat, chosen)
            spread = nx.scatter_rows(nx.reshape(picked, (len(active), 1)), active, b)
            total_logp = spread if total_logp is None else nx.add(total_logp, spread)
        if record_step_log_probs:
            vals = logp_flat.data[np.arange(len(active)), chosen]
            for pos, lane in enumerate(active):
                step_lp[lane].append(float(vals[pos]))
                actions[lane].append(int(chosen[pos]))
        else:
            for pos, lane in enumerate(active):
                actions[lane].append(int(chosen[pos]))

        if cfg.pfca:
            m_prev = nx.take_per_row(veh_emb, veh[:, None])
            prev_active = active
        env.apply(active, veh, node)
        done = env.done()
        steps += 1

    durations = env.final_durations()
    objectives = durations.max(axis=1)
    routes = []
    for lane in range(b):
        per_vehicle: list[list[int]] = [[] for _ in range(m)]
        for a in actions[lane]:
            per_vehicle[a // s].append(a % s)
        routes.append(tuple(tuple(r) for r in per_vehicle))
    if total_logp is not None:
        total_logp = nx.reshape(total_logp, (b,))
    return RolloutResult(
        objectives=objectives,
        rewards=-objectives,
        durations=durations,
        actions=actions,
        routes=routes,
        total_log_prob=total_logp,
        step_log_probs=step_lp,
    )


def rollout(
    params: ParameterSet,
    instance: Instance,
    mode: str = "greedy",
    seed: int | None = None,
    training_bn: bool = False,
) -> Trajectory:
    """Single-episode wrapper returning a full Trajectory record."""
    rngs = [np.random.default_rng(seed)] if mode == "sample" else None
    res = run_rollouts(
        params, [instance], mode, lane_rngs=rngs,
        training_bn=training_bn, record_step_log_probs=True,
    )
    s = instance.n_customers + 1
    acts = tuple((a // s, a % s) for a in res.actions[0])
    return Trajectory(
        instance=instance,
        actions=acts,
        step_log_probs=tuple(res.step_log_probs[0]),
        reward=float(res.rewards[0]),
        objective=float(res.objectives[0]),
        solution=res.solutions([instance])[0],
    )


# ---------------------------------------------------------------------------
# REINFORCE
# ---------------------------------------------------------------------------

def group_advantages(rewards: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Rewards (B*K,) grouped K-consecutive -> (advantages, per-group baselines)."""
    if rewards.size % k:
        raise ValidationError("reward count is not a multiple of the augmentation factor")
    grouped = rewards.reshape(-1, k)
    baselines = grouped.mean(axis=1)
    adv = (grouped - baselines[:, None]).reshape(-1)
    return adv, baselines


def reinforce_gradient(
    params: ParameterSet,
    groups: Sequence[Sequence[Trajectory]],
    update_running: bool = False,
) -> tuple[dict[str, np.ndarray], dict[str, float]]:
    """Gradient of the surrogate loss -(1/(B*K)) sum A * log-prob.

    Trajectories are replayed with forced actions to rebuild the
    differentiable log-probabilities; rewards enter only as constants.
    """
    if not groups:
        raise ValidationError("no trajectory groups")
    k = len(groups[0])
    for g in groups:
        if len(g) != k:
            raise ValidationError("ragged trajectory groups")
    lanes = [t for g in groups for t in g]
    instances = [t.instance for t in lanes]
    s = instances[0].n_customers + 1
    forced = [[i * s + j for i, j in t.actions] for t in lanes]
    rewards = np.array([t.reward for t in lanes], dtype=np.float64)
    adv, baselines = group_advantages(rewards, k)

    nx.zero_grads(params.params.values())
    with AdjointTape() as tape:
        res = run_rollouts(
            params, instances, "replay", forced_actions=forced,
            training_bn=True, update_running=update_running, want_log_prob=True,
        )
        if not np.allclose(res.rewards, rewards, atol=1e-9):
            raise InternalError("replayed rewards diverge from the recorded trajectories")
        weights = nx.constant((-adv / len(lanes)).astype(params.dtype))
        loss = nx.sum_(nx.mul(weights, res.total_log_prob))
    if not np.isfinite(loss.data):
        raise NumericError("non-finite REINFORCE loss")
    tape.backward(loss)

    grads = {}
    for name, p in params.params.items():
        grads[name] = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
    nx.zero_grads(params.params.values())
    stats = {
        "loss": float(loss.data),
        "mean_obj": float(res.objectives.mean()),
        "baseline_mean": float(baselines.mean()),
        "grad_norm": nx.global_grad_norm(grads.values()),
    }
    return grads, stats


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with global gradient-norm clipping, updating parameters in place."""

    def __init__(self, params: ParameterSet, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, clip: float = 1.0):
        self.lr, self.beta1, self.beta2, self.eps, self.clip = lr, beta1, beta2, eps, clip
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.params.items()}

    def step(self, params: ParameterSet, grads: dict[str, np.ndarray]) -> float:
        norm = nx.global_grad_norm(grads.values())
        scale = min(1.0, self.clip / norm) if norm > 0 else 1.0
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for name, p in params.params.items():
            g = grads[name] * scale
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            mhat = self.m[name] / bias1
            vhat = self.v[name] / bias2
            p.data = p.data - (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)
        return norm


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingConfig:
    model: ModelConfig
    n_vehicles: int
    n_customers: int
    steps: int
    out_dir: str
    distribution: str = "uniform"
    batch_size: int = 128
    k_augments: int = 8
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    dtype: str = "float32"
    shard_size: int = 256
    heldout_size: int = 256
    heldout_every: int = 50
    checkpoint_every: int = 100
    vehicle_augment: bool = True
    timing: str = "zero"

    def validate(self) -> None:
        self.model.validate()
        if self.steps < 0 or self.batch_size < 1:
            raise ValidationError("steps must be >= 0 and batch_size >= 1")
        if not 1 <= self.k_augments <= N_NODE_TRANSFORMS:
            raise ValidationError("k_augments must be in 1..8")
        if self.shard_size < self.k_augments or self.shard_size % self.k_augments:
            raise ValidationError("shard_size must be a positive multiple of k_augments")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")
        if self.timing not in ("zero", "wall"):
            raise ValidationError("timing must be 'zero' or 'wall'")
        if self.heldout_every < 1 or self.checkpoint_every < 1:
            raise ValidationError("heldout_every and checkpoint_every must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainingConfig":
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d["model"])
        cfg = TrainingConfig(**d)
        cfg.validate()
        return cfg


@dataclass
class TrainSummary:
    out_dir: str
    final_checkpoint: str
    metrics_path: str
    heldout_path: str
    steps: int
    initial_heldout_mean: float
    final_heldout_mean: float


def greedy_mean_objective(params: ParameterSet, instances: Sequence[Instance], shard_size: int = 512) -> float:
    total = 0.0
    for lo in range(0, len(instances), shard_size):
        chunk = instances[lo : lo + shard_size]
        res = run_rollouts(params, chunk, "greedy", training_bn=False)
        total += float(res.objectives.sum())
    return total / len(instances)


def _gen_config(cfg: TrainingConfig, seed: int) -> GenConfig:
    return GenConfig(
        n_customers=cfg.n_customers,
        n_vehicles=cfg.n_vehicles,
        distribution=cfg.distribution,
        seed=seed,
    )


def train(config: TrainingConfig, log: Callable[[str], None] | None = None) -> TrainSummary:
    """Run the REINFORCE loop and write checkpoints, metrics, and held-out evals.

    Deterministic under the config seed: instance generation, augmentation,
    and action sampling each draw from their own derived seed streams.
    """
    config.validate()
    os.makedirs(config.out_dir, exist_ok=True)
    say = log or (lambda s: None)

    params = init_parameters(config.model, derive_seed(config.seed, _SEED_INIT), dtype=np.dtype(config.dtype))
    heldout = generate_many(
        _gen_config(config, 0), config.heldout_size, base_seed=derive_seed(config.seed, _SEED_EVAL),
    )

    config_path = os.path.join(config.out_dir, "train_config.json")
    with open(config_path, "w") as f:
        json.dump(config.to_dict(), f, sort_keys=True, indent=1)
        f.write("\n")

    metrics_path = os.path.join(config.out_dir, "metrics.tsv")
    heldout_path = os.path.join(config.out_dir, "heldout.tsv")
    provenance = "# config: " + json.dumps(config.to_dict(), sort_keys=True)

    initial_eval = greedy_mean_objective(params, heldout)
    opt = Adam(params, lr=config.lr, beta1=config.beta1, beta2=config.beta2,
               eps=config.eps, clip=config.grad_clip)
    final_eval = initial_eval

    with open(metrics_path, "w") as mf, open(heldout_path, "w") as hf:
        mf.write(provenance + "\n")
        mf.write("step\tmean_obj\tbaseline_mean\tgrad_norm\tseconds\n")
        hf.write(provenance + "\n")
        hf.write("step\tmean_obj\n")
        hf.write(f"0\t{initial_eval:.6f}\n")
        hf.flush()

        for step in range(1, config.steps + 1):
            t0 = time.perf_counter()
            bases = generate_many(
                _gen_config(config, 0), config.batch_size,
                base_seed=derive_seed(config.seed, _SEED_GEN, step),
            )
            aug = augment_batch(
                bases, config.k_augments,
                rng=derive_rng(config.seed, _SEED_AUG, step),
                vehicle_augment=config.vehicle_augment,
            )
            lanes = aug.variants
            lane_rngs = [
                derive_rng(config.seed, _SEED_ACT, step, i) for i in range(len(lanes))
            ]

            grads: dict[str, np.ndarray] = {
                n: np.zeros_like(p.data) for n, p in params.params.items()
            }
            obj_sum = 0.0
            n_lanes = len(lanes)
            for lo in range(0, n_lanes, config.shard_size):
                hi = min(lo + config.shard_size, n_lanes)
                shard = lanes[lo:hi]
                nx.zero_grads(params.params.values())
                with AdjointTape() as tape:
                    res = run_rollouts(
                        params, [v.instance for v in shard], "sample",
                        lane_rngs=lane_rngs[lo:hi],
                        training_bn=True, update_running=True, want_log_prob=True,
                    )
                    adv, _ = group_advantages(res.rewards, config.k_augments)
                    weights = nx.constant((-adv / n_lanes).astype(params.dtype))
                    loss = nx.sum_(nx.mul(weights, res.total_log_prob))
                if not np.isfinite(loss.data):
                    raise NumericError(
                        f"non-finite loss at step {step}, lanes {lo}..{hi}: "
                        f"objectives {res.objectives.min():.4f}..{res.objectives.max():.4f}"
                    )
                tape.backward(loss)
                for name, p in params.params.items():
                    if p.grad is not None:
                        grads[name] += p.grad
                obj_sum += float(res.objectives.sum())
            nx.zero_grads(params.params.values())

            mean_obj = obj_sum / n_lanes
            grad_norm = opt.step(params, grads)
            seconds = (time.perf_counter() - t0) if config.timing == "wall" else 0.0
            mf.write(f"{step}\t{mean_obj:.6f}\t{-mean_obj:.6f}\t{grad_norm:.6f}\t{seconds:.6f}\n")
            mf.flush()

            if step % config.heldout_every == 0 or step == config.steps:
                final_eval = greedy_mean_objective(params, heldout)
                hf.write(f"{step}\t{final_eval:.6f}\n")
                hf.flush()
                say(f"step {step}: train mean obj {mean_obj:.4f}, held-out greedy {final_eval:.4f}")
            if step % config.checkpoint_every == 0:
                save_checkpoint(params, os.path.join(config.out_dir, f"ckpt_{step:06d}.bin"))

    final_path = os.path.join(config.out_dir, "ckpt_final.bin")
    save_checkpoint(params, final_path)
    return TrainSummary(
        out_dir=config.out_dir,
        final_checkpoint=final_path,
        metrics_path=metrics_path,
        heldout_path=heldout_path,
        steps=config.steps,
        initial_heldout_mean=initial_eval,
        final_heldout_mean=final_eval,
    )
