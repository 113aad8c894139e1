"""Command-line front end: generate, train, solve, eval, bench, selftest.

One binary with subcommands.  Config precedence is CLI flag over config-file
entry over built-in default; every output file carries a '# config:' line (or
a config record) naming the settings that produced it.  All commands are
deterministic under their seeds, and --workers never changes bytes because
work items use per-item derived seeds regardless of scheduling.

Exit codes: 0 success, 1 selftest failures, 2 validation/usage errors,
3 file-format or I/O errors, 4 numeric failures.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import inference, numerics as nx
from .baselines import SearchBudget, exact_small, genetic, simulated_annealing
from .errors import FileFormatError, InternalError, NumericError, ValidationError
from .mdp import (
    Solution,
    evaluate_solution,
    random_rollout,
    read_solution,
    solution_to_dict,
)
from .model import (
    ModelConfig,
    init_parameters,
    load_checkpoint,
    pfca_update,
    save_checkpoint,
)
from .problem import (
    GenConfig,
    Instance,
    generate_many,
    instance_from_dict,
    instance_to_dict,
    instances_equal,
    read_instance,
)
from .training import (
    TrainingConfig,
    augment_instance,
    derive_seed,
    map_routes_through_permutation,
    reinforce_gradient,
    rollout,
    train,
)

EXIT_OK = 0
EXIT_SELFTEST = 1
EXIT_VALIDATION = 2
EXIT_FILE = 3
EXIT_NUMERIC = 4

# Namespace tags for harness-owned seed streams; disjoint from the training
# module's internal tags so shared base seeds never collide across uses.
_STREAM_SOLVE = 21
_STREAM_BENCH_GEN = 22
_STREAM_BENCH_SOLVE = 23

NEURAL_SOLVERS = ("greedy", "sample")
ALL_SOLVERS = ("exact", "sa", "ga", "greedy", "sample")


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------

def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise FileFormatError(f"cannot read config file {path}: {exc}") from exc
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise FileFormatError("config file must hold a JSON object")
    return data


def _merge(defaults: dict, file_cfg: dict, cli: dict) -> dict:
    """CLI flag > config-file entry > default; unknown file keys rejected."""
    unknown = sorted(set(file_cfg) - set(defaults))
    if unknown:
        raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
    out = dict(defaults)
    out.update(file_cfg)
    for key, val in cli.items():
        if key in out and val is not None:
            out[key] = val
    return out


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise ValidationError(f"missing required option(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")


def _provenance(command: str, cfg: dict) -> str:
    # Workers is a scheduling knob with no effect on results; leaving it out
    # keeps output bytes identical across worker counts.
    slim = {k: v for k, v in cfg.items() if k != "workers"}
    return json.dumps({"command": command, **slim}, sort_keys=True)


def _int_list(text: str, flag: str) -> list[int]:
    try:
        vals = [int(tok) for tok in str(text).split(",") if tok.strip() != ""]
    except ValueError as exc:
        raise ValidationError(f"{flag} expects a comma-separated integer list") from exc
    if not vals:
        raise ValidationError(f"{flag} expects at least one value")
    return vals


# ---------------------------------------------------------------------------
# Instance and reference I/O
# ---------------------------------------------------------------------------

def load_instances(path: str) -> list[Instance]:
    """Load one instance file, a .jsonl stream, or a directory of *.json."""
    p = Path(path)
    if p.is_dir():
        files = sorted(f for f in p.glob("*.json") if f.name != "manifest.json")
        if not files:
            raise ValidationError(f"no instance files in {path}")
        return [read_instance(f) for f in files]
    if not p.exists():
        raise FileFormatError(f"instance path {path} does not exist")
    if p.suffix == ".jsonl":
        out = []
        for line in p.read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if isinstance(rec, dict) and "customers" in rec:
                out.append(instance_from_dict(rec))
        if not out:
            raise FileFormatError(f"no instance records in {path}")
        return out
    return [read_instance(p)]


def load_references(path: str) -> dict[str, float]:
    """Objectives keyed by instance id, from a solutions .jsonl or a JSON map."""
    p = Path(path)
    try:
        raw = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise FileFormatError(f"cannot read references {path}: {exc}") from exc
    refs: dict[str, float] = {}
    if p.suffix == ".jsonl":
        for line in raw.splitlines():
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FileFormatError(f"bad JSON line in {path}: {exc}") from exc
            if isinstance(rec, dict) and "instance_id" in rec and "objective" in rec:
                refs[str(rec["instance_id"])] = float(rec["objective"])
    else:
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise FileFormatError(f"references file {path} is not valid JSON: {exc}") from exc
        if isinstance(data, dict):
            refs = {str(k): float(v) for k, v in data.items()}
        elif isinstance(data, list):
            for rec in data:
                if isinstance(rec, dict) and "instance_id" in rec:
                    refs[str(rec["instance_id"])] = float(rec["objective"])
    if not refs:
        raise FileFormatError(f"no reference objectives found in {path}")
    return refs


# ---------------------------------------------------------------------------
# Solver dispatch and parallel map
# ---------------------------------------------------------------------------

def _solve_one(kind: str, params, instance: Instance, seed: int, cfg: dict) -> Solution:
    if kind == "greedy":
        return inference.solve_greedy(params, instance)
    if kind == "sample":
        return inference.solve_sampling(params, instance, k=int(cfg["k"]), seed=seed)
    if kind == "exact":
        return exact_small(instance)[1]
    if kind == "sa":
        return simulated_annealing(
            instance, SearchBudget(max_iterations=int(cfg["sa_iterations"]), seed=seed))
    if kind == "ga":
        return genetic(
            instance, SearchBudget(max_iterations=int(cfg["ga_evaluations"]), seed=seed))
    raise ValidationError(f"unknown solver {kind!r}; choose from {', '.join(ALL_SOLVERS)}")


def _solve_all(
    kind: str,
    params,
    instances: Sequence[Instance],
    item_seeds: Sequence[int],
    cfg: dict,
    workers: int,
    timing: str,
) -> list[tuple[Solution, float]]:
    """Solve each instance; results ordered like the input, independent of
    worker count because each item carries its own derived seed."""

    def work(item: tuple[Instance, int]) -> tuple[Solution, float]:
        instance, seed = item
        t0 = time.perf_counter()
        sol = _solve_one(kind, params, instance, seed, cfg)
        secs = (time.perf_counter() - t0) if timing == "wall" else 0.0
        return sol, secs

    items = list(zip(instances, item_seeds))
    if workers <= 1:
        return [work(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(work, items))


def _load_params_if_needed(kinds: Sequence[str], checkpoint: str | None):
    if not any(k in NEURAL_SOLVERS for k in kinds):
        return None
    if checkpoint is None:
        raise ValidationError("--checkpoint is required for greedy/sample solvers")
    params, _ = load_checkpoint(checkpoint)
    return params


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

GEN_DEFAULTS = {
    "out": None,
    "m": 3,
    "n": 10,
    "count": 10,
    "dist": "uniform",
    "seed": 0,
}


def cmd_generate(cfg: dict) -> int:
    _require(cfg, "out")
    gen = GenConfig(
        n_customers=int(cfg["n"]),
        n_vehicles=int(cfg["m"]),
        distribution=str(cfg["dist"]),
    )
    instances = generate_many(gen, int(cfg["count"]), base_seed=int(cfg["seed"]))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    prov = _provenance("generate", cfg)
    ids = []
    for inst in instances:
        rec = instance_to_dict(inst)
        rec["provenance"] = json.loads(prov)
        (out / f"{inst.id}.json").write_text(
            json.dumps(rec, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        ids.append(inst.id)
    manifest = {"command": "generate", "config": json.loads(prov), "ids": ids}
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {len(ids)} instances to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

TRAIN_DEFAULTS = {
    "out": None,
    "m": 3,
    "n": 10,
    "steps": 500,
    "batch_size": 128,
    "k_augments": 8,
    "lr": 1e-4,
    "grad_clip": 1.0,
    "seed": 0,
    "dist": "uniform",
    "embed_dim": 128,
    "layers": 3,
    "heads": 8,
    "logit_clip": 10.0,
    "knn_k": None,
    "attr_scale": "unit",
    "dtype": "float32",
    "shard_size": 256,
    "heldout_size": 256,
    "heldout_every": 50,
    "checkpoint_every": 100,
    "timing": "zero",
    "no_dual_modality": False,
    "no_pfca": False,
    "no_vehicle_augment": False,
}


def model_config_from(cfg: dict) -> ModelConfig:
    n = int(cfg["n"])
    knn_k = cfg.get("knn_k")
    if knn_k is None:
        knn_k = min(16, n)
    return ModelConfig(
        embed_dim=int(cfg["embed_dim"]),
        head_count=int(cfg["heads"]),
        encoder_layers=int(cfg["layers"]),
        logit_clip=float(cfg["logit_clip"]),
        knn_k=int(knn_k),
        dual_modality=not bool(cfg["no_dual_modality"]),
        pfca=not bool(cfg["no_pfca"]),
        attr_scale=str(cfg["attr_scale"]),
    )


def cmd_train(cfg: dict) -> int:
    _require(cfg, "out")
    tc = TrainingConfig(
        model=model_config_from(cfg),
        n_vehicles=int(cfg["m"]),
        n_customers=int(cfg["n"]),
        steps=int(cfg["steps"]),
        out_dir=str(cfg["out"]),
        distribution=str(cfg["dist"]),
        batch_size=int(cfg["batch_size"]),
        k_augments=int(cfg["k_augments"]),
        lr=float(cfg["lr"]),
        grad_clip=float(cfg["grad_clip"]),
        seed=int(cfg["seed"]),
        dtype=str(cfg["dtype"]),
        shard_size=int(cfg["shard_size"]),
        heldout_size=int(cfg["heldout_size"]),
        heldout_every=int(cfg["heldout_every"]),
        checkpoint_every=int(cfg["checkpoint_every"]),
        vehicle_augment=not bool(cfg["no_vehicle_augment"]),
        timing=str(cfg["timing"]),
    )
    summary = train(tc, log=print)
    print(f"final checkpoint: {summary.final_checkpoint}")
    print(f"heldout mean objective: {summary.initial_heldout_mean:.6f} -> "
          f"{summary.final_heldout_mean:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------

SOLVE_DEFAULTS = {
    "instances": None,
    "checkpoint": None,
    "out": None,
    "decode": "greedy",
    "k": 1280,
    "seed": 0,
    "workers": 1,
    "timing": "zero",
}


def cmd_solve(cfg: dict, explicit_k: bool) -> int:
    _require(cfg, "instances", "checkpoint", "out")
    if cfg["decode"] not in ("greedy", "sample"):
        raise ValidationError("--decode must be greedy or sample")
    if cfg["decode"] == "greedy" and explicit_k:
        raise ValidationError("--k applies only to --decode sample")
    instances = load_instances(str(cfg["instances"]))
    params, _ = load_checkpoint(str(cfg["checkpoint"]))
    seeds = [derive_seed(int(cfg["seed"]), _STREAM_SOLVE, i) for i in range(len(instances))]
    results = _solve_all(
        str(cfg["decode"]), params, instances, seeds, cfg,
        int(cfg["workers"]), str(cfg["timing"]))

    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    prov = _provenance("solve", cfg)
    with open(out / "solutions.jsonl", "w", encoding="utf-8") as f:
        f.write(json.dumps({"kind": "solve-config", "config": json.loads(prov)},
                           sort_keys=True) + "\n")
        for sol, _secs in results:
            f.write(json.dumps(solution_to_dict(sol), sort_keys=True) + "\n")
    with open(out / "report.tsv", "w", encoding="utf-8") as f:
        f.write(f"# config: {prov}\n")
        f.write("instance_id\tobj\tseconds\n")
        total = 0.0
        for (sol, secs), inst in zip(results, instances):
            check = evaluate_solution(inst, sol.routes)
            if abs(check - sol.objective) > 1e-12 * max(1.0, abs(check)):
                raise InternalError(f"stale objective for {inst.id}")
            f.write(f"{inst.id}\t{sol.objective:.6f}\t{secs:.6f}\n")
            total += secs
        mean_obj = sum(s.objective for s, _ in results) / len(results)
        f.write(f"# aggregate\tmean_obj={mean_obj:.6f}\ttotal_seconds={total:.6f}\n")
    print(f"solved {len(results)} instances; mean objective {mean_obj:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

EVAL_DEFAULTS = {
    "instances": None,
    "references": None,
    "out": None,
    "solver": "greedy",
    "checkpoint": None,
    "k": 1280,
    "seed": 0,
    "workers": 1,
    "timing": "zero",
    "sa_iterations": 50_000,
    "ga_evaluations": 20_000,
    "reference_tag": "reference",
}


def cmd_eval(cfg: dict) -> int:
    _require(cfg, "instances", "references", "out")
    kind = str(cfg["solver"])
    if kind not in ALL_SOLVERS:
        raise ValidationError(f"unknown solver {kind!r}; choose from {', '.join(ALL_SOLVERS)}")
    instances = load_instances(str(cfg["instances"]))
    references = load_references(str(cfg["references"]))
    params = _load_params_if_needed([kind], cfg.get("checkpoint"))
    seeds = [derive_seed(int(cfg["seed"]), _STREAM_SOLVE, i) for i in range(len(instances))]
    results = _solve_all(kind, params, instances, seeds, cfg,
                         int(cfg["workers"]), str(cfg["timing"]))

    rows = []
    for inst, (sol, secs) in zip(instances, results):
        if inst.id not in references:
            raise ValidationError(f"no reference objective for instance {inst.id}")
        ref = references[inst.id]
        if not (math.isfinite(ref) and ref > 0):
            raise ValidationError(f"reference objective for {inst.id} must be finite and positive")
        obj = evaluate_solution(inst, sol.routes)
        rows.append(inference.EvalRow(
            instance_id=inst.id, objective=obj, gap=(obj - ref) / ref, seconds=secs))
    total = sum(r.seconds for r in rows)
    report = inference.EvalReport(
        rows=tuple(rows),
        reference_tag=str(cfg["reference_tag"]),
        mean_objective=sum(r.objective for r in rows) / len(rows),
        mean_gap=sum(r.gap for r in rows) / len(rows),
        total_seconds=total,
        mean_seconds=total / len(rows),
    )
    inference.write_report(report, str(cfg["out"]), provenance=_provenance("eval", cfg))
    print(f"{kind}: mean objective {report.mean_objective:.6f}, "
          f"mean gap {100.0 * report.mean_gap:.3f}%")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

BENCH_DEFAULTS = {
    "out": None,
    "m": "2",
    "n": "6",
    "count": 20,
    "dist": "uniform",
    "solvers": "exact,sa",
    "checkpoint": None,
    "k": 1280,
    "seed": 0,
    "workers": 1,
    "timing": "zero",
    "sa_iterations": 50_000,
    "ga_evaluations": 20_000,
}


def cmd_bench(cfg: dict) -> int:
    """Sweep solvers over (M, N) scales; one table per scale, the first
    declared solver serving as the gap reference."""
    _require(cfg, "out")
    kinds = [tok.strip() for tok in str(cfg["solvers"]).split(",") if tok.strip()]
    if not kinds:
        raise ValidationError("--solvers expects a comma-separated list")
    for kind in kinds:
        if kind not in ALL_SOLVERS:
            raise ValidationError(f"unknown solver {kind!r}; choose from {', '.join(ALL_SOLVERS)}")
    if len(set(kinds)) != len(kinds):
        raise ValidationError("--solvers entries must be distinct")
    ms = _int_list(cfg["m"], "--m")
    ns = _int_list(cfg["n"], "--n")
    params = _load_params_if_needed(kinds, cfg.get("checkpoint"))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    prov = _provenance("bench", cfg)
    seed = int(cfg["seed"])
    count = int(cfg["count"])
    workers = int(cfg["workers"])
    timing = str(cfg["timing"])

    table_paths = []
    for si, (m, n) in enumerate([(m, n) for m in ms for n in ns]):
        gen = GenConfig(n_customers=n, n_vehicles=m, distribution=str(cfg["dist"]))
        instances = generate_many(gen, count, base_seed=derive_seed(seed, _STREAM_BENCH_GEN, m, n))
        ref_objs: list[float] | None = None
        lines = []
        for ki, kind in enumerate(kinds):
            seeds = [
                derive_seed(seed, _STREAM_BENCH_SOLVE, m, n, ki, i)
                for i in range(len(instances))
            ]
            results = _solve_all(kind, params, instances, seeds, cfg, workers, timing)
            objs = [evaluate_solution(inst, sol.routes)
                    for inst, (sol, _s) in zip(instances, results)]
            if ref_objs is None:
                ref_objs = objs
            gaps = [(o - r) / r for o, r in zip(objs, ref_objs)]
            secs = [s for _sol, s in results]
            lines.append(
                f"{kind}\t{np.mean(objs):.6f}\t{np.mean(gaps):.6f}"
                f"\t{np.sum(secs):.6f}\t{np.mean(secs):.6f}"
            )
        path = out / f"bench_m{m}_n{n}.tsv"
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"# config: {prov}\n")
            f.write(f"# scale: m={m} n={n} count={count} reference={kinds[0]}\n")
            f.write("solver\tmean_obj\tmean_gap\ttotal_seconds\tmean_seconds\n")
            for line in lines:
                f.write(line + "\n")
        table_paths.append(str(path))
        print(f"wrote {path}")
    print(f"bench complete: {len(table_paths)} table(s)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# selftest
# ---------------------------------------------------------------------------

def _check_mask_soundness() -> tuple[bool, str]:
    rng = np.random.default_rng(2024)
    for i in range(40):
        gen = GenConfig(n_customers=8, n_vehicles=3, seed=derive_seed(77, i))
        inst = generate_many(gen, 1, base_seed=derive_seed(77, i))[0]
        reward, sol = random_rollout(inst, rng)
        check = evaluate_solution(inst, sol.routes)
        if abs(-reward - check) > 1e-12:
            return False, f"reward/objective mismatch on trial {i}"
    return True, "40 random rollouts feasible, reward = -objective"


def _check_pfca() -> tuple[bool, str]:
    rng = np.random.default_rng(3)
    nodes = nx.constant(rng.standard_normal((4, 8)))
    if pfca_update(nodes, None) is not nodes:
        return False, "t=0 passthrough is not the identity"
    tiny = pfca_update(nx.constant(np.array([[1.0], [2.0]])), nx.constant(np.array([[3.0]])))
    if not np.array_equal(tiny.data, np.array([[4.0], [5.0]])):
        return False, "d=1 closed form mismatch"
    return True, "t=0 passthrough bitwise; d=1 closed form exact"


def _check_augmentation() -> tuple[bool, str]:
    for i in range(20):
        gen = GenConfig(n_customers=10, n_vehicles=3, seed=derive_seed(55, i))
        inst = generate_many(gen, 1, base_seed=derive_seed(55, i))[0]
        pts = inst.all_coords()
        base_d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
        variants = augment_instance(inst, k=8, seed=derive_seed(56, i))
        rng = np.random.default_rng(derive_seed(57, i))
        _, sol = random_rollout(inst, rng)
        for var in variants:
            vpts = var.instance.all_coords()
            var_d = np.linalg.norm(vpts[:, None, :] - vpts[None, :, :], axis=-1)
            if np.max(np.abs(var_d - base_d)) > 1e-12:
                return False, f"distance distortion on trial {i}"
            mapped = map_routes_through_permutation(sol.routes, var.vehicle_permutation)
            obj = evaluate_solution(var.instance, mapped)
            if abs(obj - sol.objective) > 1e-12:
                return False, f"objective drift on trial {i}"
    return True, "8 transforms isometric; objectives invariant through vehicle permutations"


def _check_gradients() -> tuple[bool, str]:
    mc = ModelConfig(embed_dim=8, head_count=2, encoder_layers=2, knn_k=4)
    params = init_parameters(mc, seed=11, dtype=np.float64)
    gen = GenConfig(n_customers=5, n_vehicles=2, seed=5150)
    instances = generate_many(gen, 2, base_seed=5150)
    lanes = [rollout(params, inst, mode="sample", seed=derive_seed(60, i))
             for i, inst in enumerate(instances)]
    grads, _stats = reinforce_gradient(params, [[t] for t in lanes])
    del grads

    from .training import run_rollouts

    s = instances[0].n_customers + 1
    forced = [[i * s + j for i, j in t.actions] for t in lanes]
    adv = np.array([-0.7, 1.3])

    def loss_fn():
        res = run_rollouts(params, instances, "replay", forced_actions=forced,
                           training_bn=True, want_log_prob=True)
        w = nx.constant(adv / len(lanes))
        return nx.sum_(nx.mul(w, res.total_log_prob))

    worst = nx.gradient_check(loss_fn, params.params, probe_count=40,
                              rng=np.random.default_rng(8))
    ok = worst < 1e-4
    return ok, f"max relative error {worst:.2e} over 40 probed coordinates"


def _check_round_trips(tmp: Path) -> tuple[bool, str]:
    gen = GenConfig(n_customers=6, n_vehicles=2, seed=909)
    inst = generate_many(gen, 1, base_seed=909)[0]
    p = tmp / "inst.json"
    p.write_text(json.dumps(instance_to_dict(inst)) + "\n", encoding="utf-8")
    if not instances_equal(inst, read_instance(p)):
        return False, "instance round-trip drifted"

    rng = np.random.default_rng(4242)
    _, sol = random_rollout(inst, rng)
    sp = tmp / "sol.json"
    sp.write_text(json.dumps(solution_to_dict(sol)) + "\n", encoding="utf-8")
    back = read_solution(sp)
    if back != sol:
        return False, "solution round-trip drifted"

    mc = ModelConfig(embed_dim=8, head_count=2, encoder_layers=1, knn_k=4)
    params = init_parameters(mc, seed=12, dtype=np.float64)
    cp = tmp / "ckpt.bin"
    save_checkpoint(params, str(cp))
    loaded, _cfg = load_checkpoint(str(cp))
    for name, t in params.params.items():
        if not np.array_equal(t.data, loaded.params[name].data):
            return False, f"checkpoint payload drifted at {name}"
    blob = bytearray(cp.read_bytes())
    blob[-1] ^= 0xFF
    bad = tmp / "ckpt_bad.bin"
    bad.write_bytes(bytes(blob))
    try:
        load_checkpoint(str(bad))
        return False, "corrupted checkpoint loaded without error"
    except FileFormatError:
        pass
    return True, "instance/solution/checkpoint round-trips exact; corruption detected"


def _check_determinism() -> tuple[bool, str]:
    mc = ModelConfig(embed_dim=8, head_count=2, encoder_layers=1, knn_k=4)
    params = init_parameters(mc, seed=21, dtype=np.float64)
    gen = GenConfig(n_customers=6, n_vehicles=2, seed=303)
    inst = generate_many(gen, 1, base_seed=303)[0]
    a = inference.solve_greedy(params, inst)
    b = inference.solve_greedy(params, inst)
    if a != b:
        return False, "greedy is not repeatable"
    s1 = inference.solve_sampling(params, inst, k=8, seed=5, shard_size=3)
    s2 = inference.solve_sampling(params, inst, k=8, seed=5, shard_size=8)
    if s1 != s2:
        return False, "sampling depends on shard size"
    return True, "greedy repeatable; sampling invariant to shard size"


def cmd_selftest(cfg: dict) -> int:
    import tempfile

    failures = 0
    rows = []
    with tempfile.TemporaryDirectory() as tmp:
        checks: list[tuple[str, Callable[[], tuple[bool, str]]]] = [
            ("mask soundness", _check_mask_soundness),
            ("pfca contract", _check_pfca),
            ("augmentation invariance", _check_augmentation),
            ("gradient check", _check_gradients),
            ("round trips", lambda: _check_round_trips(Path(tmp))),
            ("determinism", _check_determinism),
        ]
        for name, fn in checks:
            try:
                ok, detail = fn()
            except Exception as exc:  # a crash is a failure, not an abort
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            rows.append((name, ok, detail))
    width = max(len(r[0]) for r in rows)
    for name, ok, detail in rows:
        status = "PASS" if ok else "FAIL"
        print(f"{name.ljust(width)}  {status}  {detail}")
        failures += 0 if ok else 1
    print(f"{failures} failure(s) out of {len(rows)} checks")
    return EXIT_OK if failures == 0 else EXIT_SELFTEST


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; CLI flags override its entries")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmhcvrp",
        description="Min-max heterogeneous capacitated VRP: neural solver and references",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write random instance files plus a manifest")
    _add_common(g)
    g.add_argument("--out")
    g.add_argument("--m", type=int)
    g.add_argument("--n", type=int)
    g.add_argument("--count", type=int)
    g.add_argument("--dist", choices=["uniform", "clustered"])

    t = sub.add_parser("train", help="train a policy with REINFORCE")
    _add_common(t)
    t.add_argument("--out")
    t.add_argument("--m", type=int)
    t.add_argument("--n", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--k-augments", type=int, dest="k_augments")
    t.add_argument("--lr", type=float)
    t.add_argument("--grad-clip", type=float, dest="grad_clip")
    t.add_argument("--dist", choices=["uniform", "clustered"])
    t.add_argument("--embed-dim", type=int, dest="embed_dim")
    t.add_argument("--layers", type=int)
    t.add_argument("--heads", type=int)
    t.add_argument("--logit-clip", type=float, dest="logit_clip")
    t.add_argument("--knn-k", type=int, dest="knn_k")
    t.add_argument("--attr-scale", choices=["raw", "unit"], dest="attr_scale")
    t.add_argument("--dtype", choices=["float32", "float64"])
    t.add_argument("--shard-size", type=int, dest="shard_size")
    t.add_argument("--heldout-size", type=int, dest="heldout_size")
    t.add_argument("--heldout-every", type=int, dest="heldout_every")
    t.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    t.add_argument("--timing", choices=["zero", "wall"])
    t.add_argument("--no-dual-modality", action="store_const", const=True,
                   dest="no_dual_modality")
    t.add_argument("--no-pfca", action="store_const", const=True, dest="no_pfca")
    t.add_argument("--no-vehicle-augment", action="store_const", const=True,
                   dest="no_vehicle_augment")

    s = sub.add_parser("solve", help="solve instance files with a trained policy")
    _add_common(s)
    s.add_argument("--instances")
    s.add_argument("--checkpoint")
    s.add_argument("--out")
    s.add_argument("--decode", choices=["greedy", "sample"])
    s.add_argument("--k", type=int)
    s.add_argument("--workers", type=int)
    s.add_argument("--timing", choices=["zero", "wall"])

    e = sub.add_parser("eval", help="gap report for one solver against references")
    _add_common(e)
    e.add_argument("--instances")
    e.add_argument("--references")
    e.add_argument("--out")
    e.add_argument("--solver", choices=list(ALL_SOLVERS))
    e.add_argument("--checkpoint")
    e.add_argument("--k", type=int)
    e.add_argument("--workers", type=int)
    e.add_argument("--timing", choices=["zero", "wall"])
    e.add_argument("--sa-iterations", type=int, dest="sa_iterations")
    e.add_argument("--ga-evaluations", type=int, dest="ga_evaluations")
    e.add_argument("--reference-tag", dest="reference_tag")

    b = sub.add_parser("bench", help="solver-by-scale sweep; one table per (M, N)")
    _add_common(b)
    b.add_argument("--out")
    b.add_argument("--m", help="comma-separated vehicle counts")
    b.add_argument("--n", help="comma-separated customer counts")
    b.add_argument("--count", type=int)
    b.add_argument("--dist", choices=["uniform", "clustered"])
    b.add_argument("--solvers", help=f"comma-separated from {{{','.join(ALL_SOLVERS)}}}")
    b.add_argument("--checkpoint")
    b.add_argument("--k", type=int)
    b.add_argument("--workers", type=int)
    b.add_argument("--timing", choices=["zero", "wall"])
    b.add_argument("--sa-iterations", type=int, dest="sa_iterations")
    b.add_argument("--ga-evaluations", type=int, dest="ga_evaluations")

    st = sub.add_parser("selftest", help="fast invariant suite; nonzero exit on failure")
    _add_common(st)

    return parser


_DEFAULTS = {
    "generate": GEN_DEFAULTS,
    "train": TRAIN_DEFAULTS,
    "solve": SOLVE_DEFAULTS,
    "eval": EVAL_DEFAULTS,
    "bench": BENCH_DEFAULTS,
    "selftest": {"seed": 0},
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    command = ns.command
    cli = {k: v for k, v in vars(ns).items() if k not in ("command", "config")}
    file_cfg = _load_config_file(ns.config)
    cfg = _merge(_DEFAULTS[command], file_cfg, cli)

    if command == "generate":
        return cmd_generate(cfg)
    if command == "train":
        return cmd_train(cfg)
    if command == "solve":
        explicit_k = ns.k is not None or "k" in file_cfg
        return cmd_solve(cfg, explicit_k)
    if command == "eval":
        return cmd_eval(cfg)
    if command == "bench":
        return cmd_bench(cfg)
    if command == "selftest":
        return cmd_selftest(cfg)
    raise InternalError(f"unhandled command {command!r}")


def main() -> None:
    try:
        code = run()
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_VALIDATION
    except (FileFormatError, OSError) as exc:
        print(f"file error: {exc}", file=sys.stderr)
        code = EXIT_FILE
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    sys.exit(code)


if __name__ == "__main__":
    main()
