"""Symmetry augmentation, rollout engine, REINFORCE gradient, optimizer, loop."""

import json
import os

import numpy as np
import pytest

from mmhcvrp import (
    Adam,
    ModelConfig,
    TrainingConfig,
    ValidationError,
    augment_batch,
    augment_instance,
    distance_matrix,
    evaluate_solution,
    generate_instance,
    group_advantages,
    init_parameters,
    map_routes_through_permutation,
    node_transform,
    reinforce_gradient,
    rollout,
    run_rollouts,
    train,
)
from mmhcvrp.problem import GenConfig
from mmhcvrp.training import derive_rng, derive_seed


# ---------------------------------------------------------------------------
# Node transforms
# ---------------------------------------------------------------------------

def test_node_transform_table_exact():
    p = np.array([0.2, 0.7])
    expect = [
        (0.2, 0.7), (0.7, 0.2), (0.2, 0.3), (0.7, 0.8),
        (0.8, 0.7), (0.3, 0.2), (0.8, 0.3), (0.3, 0.8),
    ]
    for i, e in enumerate(expect):
        got = node_transform(p, i)
        assert np.allclose(got, e, atol=1e-15), i


def test_node_transform_is_isometric():
    rng = np.random.default_rng(0)
    pts = rng.random((50, 2))
    d0 = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
    for i in range(8):
        q = node_transform(pts, i)
        d = np.sqrt(((q[:, None] - q[None]) ** 2).sum(-1))
        assert np.abs(d - d0).max() <= 1e-12, i
        assert q.min() >= 0.0 and q.max() <= 1.0


def test_node_transform_identity_and_range():
    pts = np.random.default_rng(1).random((10, 2))
    assert np.array_equal(node_transform(pts, 0), pts)
    with pytest.raises(ValidationError):
        node_transform(pts, 8)
    with pytest.raises(ValidationError):
        node_transform(pts, -1)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def test_augment_variant_zero_is_identity(tiny_instance):
    vars_ = augment_instance(tiny_instance, k=8, seed=0)
    v0 = vars_[0]
    assert v0.transform_index == 0
    assert v0.vehicle_permutation == tuple(range(tiny_instance.n_vehicles))
    assert np.array_equal(v0.instance.coords, tiny_instance.coords)
    assert v0.instance.depot == tiny_instance.depot
    assert np.array_equal(v0.instance.capacities, tiny_instance.capacities)
    assert v0.instance.id == f"{tiny_instance.id}-aug0"


def test_augment_attributes_follow_permutation():
    inst = generate_instance(GenConfig(n_customers=8, n_vehicles=4, seed=7))
    vars_ = augment_instance(inst, k=8, seed=3)
    assert len(vars_) == 8
    base_dist = distance_matrix(inst)
    for i, v in enumerate(vars_):
        assert v.transform_index == i
        perm = np.array(v.vehicle_permutation)
        assert sorted(v.vehicle_permutation) == list(range(4))
        assert np.array_equal(v.instance.capacities, inst.capacities[perm])
        assert np.array_equal(v.instance.speeds, inst.speeds[perm])
        assert np.array_equal(v.instance.demands, inst.demands)
        assert np.abs(distance_matrix(v.instance) - base_dist).max() <= 1e-12


def test_augment_without_vehicle_permutations(tiny_instance):
    vars_ = augment_instance(tiny_instance, k=8, seed=5, vehicle_augment=False)
    ident = tuple(range(tiny_instance.n_vehicles))
    assert all(v.vehicle_permutation == ident for v in vars_)


def test_augment_batch_layout(small_instances):
    batch = augment_batch(small_instances, k=4, rng=np.random.default_rng(9))
    assert len(batch.variants) == 4 * len(small_instances)
    groups = batch.groups()
    assert len(groups) == len(small_instances)
    for inst, group in zip(small_instances, groups):
        assert len(group) == 4
        assert all(v.base_id == inst.id for v in group)


def test_augment_k_bounds(tiny_instance):
    with pytest.raises(ValidationError):
        augment_instance(tiny_instance, k=0)
    with pytest.raises(ValidationError):
        augment_instance(tiny_instance, k=9)


def test_map_routes_through_permutation():
    routes = [(1, 2), (3,), (4, 5)]
    assert map_routes_through_permutation(routes, (2, 0, 1)) == ((4, 5), (1, 2), (3,))
    assert map_routes_through_permutation(routes, (0, 1, 2)) == ((1, 2), (3,), (4, 5))


# ---------------------------------------------------------------------------
# Advantages
# ---------------------------------------------------------------------------

def test_group_advantages_zero_sum():
    rng = np.random.default_rng(2)
    rewards = rng.standard_normal(24)
    adv, base = group_advantages(rewards, 4)
    assert adv.shape == (24,) and base.shape == (6,)
    assert np.abs(adv.reshape(6, 4).sum(axis=1)).max() <= 1e-12
    assert np.allclose(base, rewards.reshape(6, 4).mean(axis=1))
    with pytest.raises(ValidationError):
        group_advantages(rewards, 5)


def test_group_advantages_k1_is_zero():
    adv, base = group_advantages(np.array([3.0, -1.0]), 1)
    assert np.array_equal(adv, [0.0, 0.0])
    assert np.array_equal(base, [3.0, -1.0])


# ---------------------------------------------------------------------------
# Rollout engine
# ---------------------------------------------------------------------------

def test_greedy_rollout_deterministic(tiny_params_f32, tiny_instance):
    a = rollout(tiny_params_f32, tiny_instance, mode="greedy")
    b = rollout(tiny_params_f32, tiny_instance, mode="greedy")
    assert a.actions == b.actions
    assert a.objective == b.objective


def test_sampling_rollout_seeded(tiny_params_f32, tiny_instance):
    a = rollout(tiny_params_f32, tiny_instance, mode="sample", seed=11)
    b = rollout(tiny_params_f32, tiny_instance, mode="sample", seed=11)
    assert a.actions == b.actions
    seen = {rollout(tiny_params_f32, tiny_instance, mode="sample", seed=s).actions
            for s in range(12, 20)}
    assert len(seen) > 1  # different seeds explore different action sequences


def test_rollout_reward_and_solution_consistency(tiny_params_f32, small_instances):
    for inst in small_instances:
        traj = rollout(tiny_params_f32, inst, mode="sample", seed=3)
        assert traj.reward == -traj.objective
        revalidated = evaluate_solution(inst, traj.solution.routes)
        assert abs(revalidated - traj.objective) <= 1e-9
        assert len(traj.step_log_probs) == len(traj.actions)
        assert all(lp <= 1e-7 for lp in traj.step_log_probs)


def test_batch_rollout_matches_single_lanes(tiny_params_f32, small_instances):
    batch = run_rollouts(tiny_params_f32, small_instances, "greedy")
    for i, inst in enumerate(small_instances):
        single = rollout(tiny_params_f32, inst, mode="greedy")
        assert single.solution.routes == batch.routes[i]
        assert abs(single.objective - batch.objectives[i]) <= 1e-9


def test_replay_reproduces_sampled_episode(tiny_params_f32, tiny_instance):
    traj = rollout(tiny_params_f32, tiny_instance, mode="sample", seed=21)
    s = tiny_instance.n_customers + 1
    forced = [[i * s + j for i, j in traj.actions]]
    res = run_rollouts(tiny_params_f32, [tiny_instance], "replay",
                       forced_actions=forced, want_log_prob=True)
    assert abs(res.rewards[0] - traj.reward) <= 1e-12
    assert res.routes[0] == traj.solution.routes
    assert res.total_log_prob is not None


def test_run_rollouts_argument_validation(tiny_params_f32, tiny_instance):
    with pytest.raises(ValidationError):
        run_rollouts(tiny_params_f32, [tiny_instance], "explore")
    with pytest.raises(ValidationError):
        run_rollouts(tiny_params_f32, [tiny_instance], "sample", lane_rngs=None)
    with pytest.raises(ValidationError):
        run_rollouts(tiny_params_f32, [tiny_instance], "replay", forced_actions=None)


# ---------------------------------------------------------------------------
# REINFORCE gradient
# ---------------------------------------------------------------------------

def sample_groups(params, instances, k, seed0):
    groups = []
    for gi, inst in enumerate(instances):
        groups.append([rollout(params, inst, mode="sample", seed=seed0 + 31 * gi + j)
                       for j in range(k)])
    return groups


def test_reinforce_gradient_shapes_and_stats(tiny_params_f32, small_instances):
    groups = sample_groups(tiny_params_f32, small_instances[:2], k=2, seed0=40)
    grads, stats = reinforce_gradient(tiny_params_f32, groups)
    assert set(grads) == set(tiny_params_f32.params)
    for name, g in grads.items():
        assert g.shape == tiny_params_f32.params[name].data.shape
        assert np.isfinite(g).all(), name
    assert stats["grad_norm"] > 0.0
    assert np.isfinite(stats["loss"])
    rewards = [t.reward for g in groups for t in g]
    assert stats["baseline_mean"] == pytest.approx(np.mean(rewards))


def test_reinforce_gradient_zero_when_advantages_vanish(tiny_params_f32, tiny_instance):
    groups = [[rollout(tiny_params_f32, tiny_instance, mode="sample", seed=50)]]
    grads, stats = reinforce_gradient(tiny_params_f32, groups)  # k=1: advantage 0
    assert stats["grad_norm"] == 0.0
    assert all(np.all(g == 0.0) for g in grads.values())


def test_reinforce_gradient_rejects_ragged_groups(tiny_params_f32, tiny_instance):
    g0 = [rollout(tiny_params_f32, tiny_instance, mode="sample", seed=60 + i) for i in range(2)]
    g1 = [rollout(tiny_params_f32, tiny_instance, mode="sample", seed=70)]
    with pytest.raises(ValidationError):
        reinforce_gradient(tiny_params_f32, [g0, g1])
    with pytest.raises(ValidationError):
        reinforce_gradient(tiny_params_f32, [])


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def test_adam_first_step_reference(tiny_model_config):
    ps = init_parameters(tiny_model_config, seed=14, dtype=np.float64)
    before = {n: t.data.copy() for n, t in ps.params.items()}
    grads = {n: np.ones_like(t.data) for n, t in ps.params.items()}
    total = ps.n_parameters()
    opt = Adam(ps, lr=1e-3, clip=1.0)
    norm = opt.step(ps, grads)
    assert norm == pytest.approx(np.sqrt(total))

    scale = min(1.0, 1.0 / np.sqrt(total))
    g = scale  # every coordinate
    mhat = (0.1 * g) / (1.0 - 0.9)
    vhat = (0.001 * g * g) / (1.0 - 0.999)
    delta = 1e-3 * mhat / (np.sqrt(vhat) + 1e-8)
    for n, t in ps.params.items():
        assert np.allclose(t.data, before[n] - delta, atol=1e-12), n


def test_adam_no_clip_below_threshold(tiny_model_config):
    ps = init_parameters(tiny_model_config, seed=15, dtype=np.float64)
    before = {n: t.data.copy() for n, t in ps.params.items()}
    grads = {n: np.zeros_like(t.data) for n, t in ps.params.items()}
    grads["depot_token"][0] = 0.5  # norm 0.5 < clip 1.0
    opt = Adam(ps, lr=1e-2, clip=1.0)
    norm = opt.step(ps, grads)
    assert norm == pytest.approx(0.5)
    moved = ps.params["depot_token"].data - before["depot_token"]
    assert abs(moved[0] + 1e-2 * 0.5 / (np.sqrt(0.5 ** 2) + 1e-8)) < 1e-10
    assert np.all(moved[1:] == 0.0)
    untouched = [n for n in ps.params if n != "depot_token"]
    assert all(np.array_equal(ps.params[n].data, before[n]) for n in untouched)


# ---------------------------------------------------------------------------
# Seed derivation
# ---------------------------------------------------------------------------

def test_derive_seed_stable_and_distinct():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    assert derive_seed(1, 2, 3) != derive_seed(1, 2, 4)
    assert derive_seed(1, 2) != derive_seed(2, 1)
    a = derive_rng(5, 6).random(4)
    b = derive_rng(5, 6).random(4)
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def micro_config(out_dir: str, seed: int = 3) -> TrainingConfig:
    model = ModelConfig(embed_dim=8, head_count=2, encoder_layers=1, knn_k=4)
    return TrainingConfig(
        model=model, n_vehicles=2, n_customers=6, steps=2, out_dir=out_dir,
        batch_size=4, k_augments=2, shard_size=4, heldout_size=4,
        heldout_every=1, checkpoint_every=1, seed=seed,
    )


def test_train_micro_run_artifacts(tmp_path):
    out = str(tmp_path / "run")
    summary = train(micro_config(out), log=None)
    assert summary.steps == 2
    assert os.path.isfile(os.path.join(out, "train_config.json"))
    assert os.path.isfile(summary.final_checkpoint)
    assert os.path.isfile(os.path.join(out, "ckpt_000001.bin"))
    assert os.path.isfile(os.path.join(out, "ckpt_000002.bin"))

    cfg_back = json.load(open(os.path.join(out, "train_config.json")))
    assert TrainingConfig.from_dict(cfg_back).n_customers == 6

    metrics = open(summary.metrics_path).read().splitlines()
    assert metrics[0].startswith("# config:")
    assert metrics[1].startswith("step\t")
    assert len(metrics) == 4  # provenance + header + one row per step
    cols = metrics[1].split("\t")
    row = dict(zip(cols, metrics[2].split("\t")))
    assert float(row["seconds"]) == 0.0  # timing defaults to the zero clock
    assert float(row["grad_norm"]) > 0.0

    heldout = open(summary.heldout_path).read().splitlines()
    assert heldout[0].startswith("# config:")
    assert heldout[1].startswith("step\t")
    steps_seen = [int(line.split("\t")[0]) for line in heldout[2:]]
    assert steps_seen[0] == 0  # untrained evaluation first
    assert steps_seen[-1] == 2
    assert summary.initial_heldout_mean > 0.0
    assert summary.final_heldout_mean > 0.0


def test_train_reruns_are_byte_identical(tmp_path):
    out_a = str(tmp_path / "a")
    out_b = str(tmp_path / "b")
    sa = train(micro_config(out_a), log=None)
    sb = train(micro_config(out_b), log=None)
    def body(path):
        # The provenance line embeds out_dir; everything below it must match.
        lines = open(path, "rb").read().splitlines(keepends=True)
        return b"".join(l for l in lines if not l.startswith(b"# config:"))

    for name in ("metrics.tsv", "heldout.tsv"):
        assert body(os.path.join(out_a, name)) == body(os.path.join(out_b, name)), name
    ca = open(os.path.join(out_a, "ckpt_final.bin"), "rb").read()
    cb = open(os.path.join(out_b, "ckpt_final.bin"), "rb").read()
    assert ca == cb
    assert sa.final_heldout_mean == sb.final_heldout_mean


def test_train_seed_changes_results(tmp_path):
    sa = train(micro_config(str(tmp_path / "s3"), seed=3), log=None)
    sb = train(micro_config(str(tmp_path / "s4"), seed=4), log=None)
    assert sa.initial_heldout_mean != sb.initial_heldout_mean


def test_training_config_validation(tmp_path):
    good = micro_config(str(tmp_path / "x"))
    good.validate()
    import dataclasses
    with pytest.raises(ValidationError):
        dataclasses.replace(good, shard_size=5).validate()  # not a multiple of k
    with pytest.raises(ValidationError):
        dataclasses.replace(good, k_augments=9).validate()
    with pytest.raises(ValidationError):
        dataclasses.replace(good, timing="cpu").validate()
    with pytest.raises(ValidationError):
        dataclasses.replace(good, batch_size=0).validate()
    back = TrainingConfig.from_dict(good.to_dict())
    assert back == good
