"""Problem instances for min-max heterogeneous capacitated vehicle routing.

An instance is one depot plus N customers on the unit square, served by a
fleet of M vehicles that differ in capacity and speed.  This module owns
instance generation (uniform and clustered customer layouts), the Euclidean
distance matrix, and the JSON file format used to persist instances.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import FileFormatError, ValidationError

INSTANCE_FORMAT_VERSION = 1

DISTRIBUTIONS = ("uniform", "clustered")


@dataclass(frozen=True)
class Instance:
    """Immutable problem description.

    Node index 0 is the depot; customers are 1..N.  Arrays are read-only:
    ``coords`` has shape (N, 2), ``demands`` (N,) positive integers,
    ``capacities`` (M,) positive integers, ``speeds`` (M,) positive reals.
    """

    depot: tuple[float, float]
    coords: np.ndarray
    demands: np.ndarray
    capacities: np.ndarray
    speeds: np.ndarray
    id: str = ""
    distribution: str = "uniform"

    def __post_init__(self):
        object.__setattr__(self, "coords", _frozen(np.asarray(self.coords, dtype=np.float64)))
        object.__setattr__(self, "demands", _frozen(np.asarray(self.demands, dtype=np.int64)))
        object.__setattr__(self, "capacities", _frozen(np.asarray(self.capacities, dtype=np.int64)))
        object.__setattr__(self, "speeds", _frozen(np.asarray(self.speeds, dtype=np.float64)))
        self.validate()

    @property
    def n_customers(self) -> int:
        return self.coords.shape[0]

    @property
    def n_vehicles(self) -> int:
        return self.capacities.shape[0]

    def all_coords(self) -> np.ndarray:
        """Depot plus customer coordinates, shape (N+1, 2); row 0 is the depot."""
        return np.vstack([np.asarray(self.depot, dtype=np.float64)[None, :], self.coords])

    def validate(self) -> None:
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise ValidationError(f"coords must be (N, 2), got {self.coords.shape}")
        if self.n_customers < 1:
            raise ValidationError("instance needs at least one customer")
        if self.n_vehicles < 1:
            raise ValidationError("instance needs at least one vehicle")
        if self.demands.shape != (self.n_customers,):
            raise ValidationError("demands must have one entry per customer")
        if self.speeds.shape != (self.n_vehicles,):
            raise ValidationError("speeds must have one entry per vehicle")
        if not np.all(np.isfinite(self.coords)) or not all(math.isfinite(c) for c in self.depot):
            raise ValidationError("coordinates must be finite")
        if np.any(self.demands <= 0):
            bad = int(np.argmax(self.demands <= 0)) + 1
            raise ValidationError(f"customer {bad} has non-positive demand")
        if np.any(self.capacities <= 0):
            raise ValidationError("vehicle capacities must be positive")
        if np.any(self.speeds <= 0.0):
            raise ValidationError("vehicle speeds must be strictly positive")
        if int(self.demands.max()) > int(self.capacities.max()):
            raise ValidationError(
                f"demand {int(self.demands.max())} exceeds the largest vehicle capacity "
                f"{int(self.capacities.max())}; instance is unsolvable"
            )
        if self.distribution not in DISTRIBUTIONS:
            raise ValidationError(f"unknown distribution tag {self.distribution!r}")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = a.copy()
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class GenConfig:
    """Sampling configuration for random instances.

    Defaults follow the usual benchmark distributions: coordinates uniform on
    the unit square, integer demands in 1..9, integer capacities in 20..40,
    speeds uniform on [0.5, 1].
    """

    n_customers: int
    n_vehicles: int
    demand_range: tuple[int, int] = (1, 9)
    capacity_range: tuple[int, int] = (20, 40)
    speed_interval: tuple[float, float] = (0.5, 1.0)
    distribution: str = "uniform"
    cluster_count: int = 3
    cluster_noise_sigma: float = 0.05
    seed: int | None = None
    # Permits capacity ranges that may produce single customers no vehicle
    # can serve; off by default because such instances are unsolvable.
    allow_tight_capacity: bool = False

    def validate(self) -> None:
        if self.n_customers < 1 or self.n_vehicles < 1:
            raise ValidationError("need at least one customer and one vehicle")
        if self.demand_range[0] > self.demand_range[1] or self.demand_range[0] < 1:
            raise ValidationError(f"empty or non-positive demand range {self.demand_range}")
        if self.capacity_range[0] > self.capacity_range[1] or self.capacity_range[0] < 1:
            raise ValidationError(f"empty or non-positive capacity range {self.capacity_range}")
        if self.speed_interval[0] > self.speed_interval[1] or self.speed_interval[0] <= 0:
            raise ValidationError(f"bad speed interval {self.speed_interval}")
        if self.distribution not in DISTRIBUTIONS:
            raise ValidationError(f"unknown distribution {self.distribution!r}")
        if self.distribution == "clustered":
            if self.cluster_count < 1:
                raise ValidationError("cluster_count must be >= 1")
            if not self.cluster_noise_sigma > 0:
                raise ValidationError("cluster_noise_sigma must be > 0")
        if self.capacity_range[0] < self.demand_range[1] and not self.allow_tight_capacity:
            raise ValidationError(
                f"min capacity {self.capacity_range[0]} < max demand {self.demand_range[1]}: "
                "a customer may be unserviceable by some vehicle "
                "(set allow_tight_capacity=True to override)"
            )


def generate_instance(config: GenConfig) -> Instance:
    """Draw one instance from the configured distribution.

    Deterministic for a fixed seed: the draw order is depot, customer
    coordinates (clustered mode: centers, assignments, noise), demands,
    capacities, speeds.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    n, m = config.n_customers, config.n_vehicles

    depot = tuple(rng.uniform(0.0, 1.0, size=2))
    if config.distribution == "uniform":
        coords = rng.uniform(0.0, 1.0, size=(n, 2))
    else:
        centers = rng.uniform(0.0, 1.0, size=(config.cluster_count, 2))
        assignment = rng.integers(0, config.cluster_count, size=n)
        noise = rng.normal(0.0, config.cluster_noise_sigma, size=(n, 2))
        coords = np.clip(centers[assignment] + noise, 0.0, 1.0)

    demands = rng.integers(config.demand_range[0], config.demand_range[1] + 1, size=n)
    capacities = rng.integers(config.capacity_range[0], config.capacity_range[1] + 1, size=m)
    speeds = rng.uniform(config.speed_interval[0], config.speed_interval[1], size=m)

    seed_tag = "none" if config.seed is None else str(config.seed)
    inst_id = f"{config.distribution}-m{m}-n{n}-s{seed_tag}"
    return Instance(
        depot=depot,
        coords=coords,
        demands=demands,
        capacities=capacities,
        speeds=speeds,
        id=inst_id,
        distribution=config.distribution,
    )


def generate_many(config: GenConfig, count: int, base_seed: int) -> list[Instance]:
    """Generate ``count`` instances with independent per-instance seeds.

    Instance i uses the seed sequence (base_seed, i), so any subset can be
    regenerated in isolation (and in parallel) without changing results.
    """
    out = []
    for i in range(count):
        sub = np.random.SeedSequence(base_seed, spawn_key=(i,))
        seed = int(sub.generate_state(1, np.uint64)[0])
        inst = generate_instance(replace(config, seed=seed))
        inst = replace(inst, id=f"{inst.id}-b{base_seed}-i{i}")
        out.append(inst)
    return out


def distance_matrix(instance: Instance) -> np.ndarray:
    """Euclidean distances over depot+customers; index 0 is the depot.

    The result is exactly symmetric with an exactly zero diagonal.
    """
    pts = instance.all_coords()
    diff = pts[:, None, :] - pts[None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=2))
    np.fill_diagonal(d, 0.0)
    return d


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def instance_to_dict(instance: Instance) -> dict:
    return {
        "format_version": INSTANCE_FORMAT_VERSION,
        "id": instance.id,
        "distribution": instance.distribution,
        "depot": [float(instance.depot[0]), float(instance.depot[1])],
        "customers": [
            {"x": float(x), "y": float(y), "demand": int(q)}
            for (x, y), q in zip(instance.coords, instance.demands)
        ],
        "vehicles": [
            {"capacity": int(c), "speed": float(s)}
            for c, s in zip(instance.capacities, instance.speeds)
        ],
    }


def instance_from_dict(data: dict) -> Instance:
    if not isinstance(data, dict):
        raise FileFormatError("instance record must be a JSON object")
    version = data.get("format_version")
    if version != INSTANCE_FORMAT_VERSION:
        raise FileFormatError(f"unsupported instance format_version {version!r}")
    try:
        depot = (float(data["depot"][0]), float(data["depot"][1]))
        customers = data["customers"]
        vehicles = data["vehicles"]
        coords = np.array([[c["x"], c["y"]] for c in customers], dtype=np.float64)
        demands = np.array([c["demand"] for c in customers], dtype=np.int64)
        capacities = np.array([v["capacity"] for v in vehicles], dtype=np.int64)
        speeds = np.array([v["speed"] for v in vehicles], dtype=np.float64)
    except (KeyError, TypeError, IndexError) as exc:
        raise FileFormatError(f"malformed instance record: {exc}") from exc
    if coords.size == 0:
        raise FileFormatError("instance record has no customers")
    return Instance(
        depot=depot,
        coords=coords,
        demands=demands,
        capacities=capacities,
        speeds=speeds,
        id=str(data.get("id", "")),
        distribution=str(data.get("distribution", "uniform")),
    )


def write_instance(instance: Instance, path: str | Path) -> None:
    """Write an instance as UTF-8 JSON; floats keep full round-trip precision."""
    text = json.dumps(instance_to_dict(instance), indent=2)
    Path(path).write_text(text + "\n", encoding="utf-8")


def read_instance(path: str | Path) -> Instance:
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise FileFormatError(f"cannot read instance file {path}: {exc}") from exc
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"instance file {path} is not valid JSON: {exc}") from exc
    return instance_from_dict(data)


def instances_equal(a: Instance, b: Instance) -> bool:
    return (
        a.id == b.id
        and a.distribution == b.distribution
        and a.depot == b.depot
        and np.array_equal(a.coords, b.coords)
        and np.array_equal(a.demands, b.demands)
        and np.array_equal(a.capacities, b.capacities)
        and np.array_equal(a.speeds, b.speeds)
    )
