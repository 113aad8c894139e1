"""Policy network pieces: embeddings, attention wiring, decoder, checkpoints."""

import math

import numpy as np
import pytest

from mmhcvrp import (
    FileFormatError,
    ModelConfig,
    ValidationError,
    action_mask,
    generate_instance,
    init_parameters,
    init_state,
    load_checkpoint,
    save_checkpoint,
)
from mmhcvrp import numerics as nx
from mmhcvrp.model import (
    action_log_probabilities,
    action_probabilities,
    edge_features,
    edge_features_for,
    encode_nodes,
    encode_nodes_batch,
    encode_vehicles,
    encode_vehicles_batch,
    pair_logits,
    pfca_update,
    vehicle_attributes,
)
from mmhcvrp.problem import GenConfig

from conftest import make_line_instance


def ref_softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# Edge features
# ---------------------------------------------------------------------------

def test_edge_features_knn_oracle():
    rng = np.random.default_rng(0)
    pts = rng.random((6, 2))
    dist = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
    k = 3
    feats = edge_features(dist, "knn_sorted", k)
    assert feats.shape == (6, k)
    for i in range(6):
        others = np.sort(np.delete(dist[i], i))
        assert np.allclose(feats[i], others[:k], atol=1e-15)
    assert (np.diff(feats, axis=1) >= 0).all()


def test_edge_features_relabeling_invariant_rows():
    rng = np.random.default_rng(1)
    pts = rng.random((5, 2))
    dist = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
    perm = np.array([0, 3, 1, 4, 2])
    permuted = dist[np.ix_(perm, perm)]
    a = edge_features(dist, "knn_sorted", 3)
    b = edge_features(permuted, "knn_sorted", 3)
    assert np.array_equal(a[perm], b)


def test_edge_features_k_too_large():
    dist = np.zeros((4, 4))
    with pytest.raises(ValidationError):
        edge_features(dist, "knn_sorted", 4)
    edge_features(dist, "knn_sorted", 3)  # k = n - 1 is the limit


def test_edge_features_full_row():
    rng = np.random.default_rng(2)
    dist = rng.random((5, 5))
    feats = edge_features(dist, "full_row")
    assert np.array_equal(feats, dist)
    feats[0, 0] = 99.0
    assert dist[0, 0] != 99.0  # returned array is a copy


def test_edge_features_for_checks_full_row_size(tiny_instance):
    cfg = ModelConfig(embed_dim=8, head_count=2, encoder_layers=1,
                      edge_feature_mode="full_row", full_row_size=5)
    with pytest.raises(ValidationError):
        edge_features_for(tiny_instance, cfg)  # instance has 7 nodes


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def test_init_bounds_and_special_tensors(tiny_model_config):
    ps = init_parameters(tiny_model_config, seed=0, dtype=np.float64)
    for name, t in ps.params.items():
        if name == "depot_token" or name.endswith(".beta"):
            assert np.all(t.data == 0.0), name
        elif name.endswith(".gamma"):
            assert np.all(t.data == 1.0), name
        else:
            bound = 1.0 / math.sqrt(t.data.shape[0])
            assert np.abs(t.data).max() <= bound, name
            assert t.data.std() > 0.0, name
        assert t.requires_grad
    for name, t in ps.buffers.items():
        expect = 1.0 if name.endswith(".var") else 0.0
        assert np.all(t.data == expect), name
        assert not t.requires_grad


def test_init_seed_determinism(tiny_model_config):
    a = init_parameters(tiny_model_config, seed=5)
    b = init_parameters(tiny_model_config, seed=5)
    c = init_parameters(tiny_model_config, seed=6)
    for name in a.params:
        assert np.array_equal(a.params[name].data, b.params[name].data)
    assert any(not np.array_equal(a.params[n].data, c.params[n].data) for n in a.params)


def test_param_count_independent_of_pfca(tiny_model_config):
    import dataclasses
    on = init_parameters(dataclasses.replace(tiny_model_config, pfca=True), 0)
    off = init_parameters(dataclasses.replace(tiny_model_config, pfca=False), 0)
    assert on.n_parameters() == off.n_parameters()
    assert list(on.params) == list(off.params)


def test_param_count_formula(tiny_model_config):
    d = tiny_model_config.embed_dim
    k = tiny_model_config.knn_k
    layers = tiny_model_config.encoder_layers
    expect = (
        3 * d + d            # node projection + depot token
        + k * d              # edge projection
        + layers * (4 * d * d + 2 * d + 4 * d * d + 4 * d * d + 2 * d)
        + 4 * d * d + 2 * d  # fusion attention + gate
        + 4 * 4 * d + 4 * d * d + d * d  # vehicle mlp + positional projection
        + 4 * d * d + 4 * d * d          # vehicle self + cross attention
    )
    ps = init_parameters(tiny_model_config, 0)
    assert ps.n_parameters() == expect


def test_dual_modality_off_drops_edge_parameters(tiny_model_config):
    import dataclasses
    on = init_parameters(tiny_model_config, 0)
    off = init_parameters(dataclasses.replace(tiny_model_config, dual_modality=False), 0)
    d = tiny_model_config.embed_dim
    dropped = tiny_model_config.knn_k * d + 4 * d * d + 2 * d
    assert on.n_parameters() - off.n_parameters() == dropped
    assert "edge_embed.w" not in off.params
    assert "fuse.gate.w" not in off.params


def test_model_config_validation():
    with pytest.raises(ValidationError):
        ModelConfig(embed_dim=10, head_count=4).validate()
    with pytest.raises(ValidationError):
        ModelConfig(encoder_layers=0).validate()
    with pytest.raises(ValidationError):
        ModelConfig(edge_feature_mode="full_row").validate()  # needs size
    with pytest.raises(ValidationError):
        ModelConfig(edge_feature_mode="nope").validate()
    with pytest.raises(ValidationError):
        ModelConfig(logit_clip=0.0).validate()
    with pytest.raises(ValidationError):
        ModelConfig.from_dict({"embed_dim": 8, "mystery": 1})


# ---------------------------------------------------------------------------
# Vehicle attributes
# ---------------------------------------------------------------------------

def test_vehicle_attributes_raw():
    speeds = np.array([[0.5, 1.0]])
    caps = np.array([[20, 40]])
    used = np.array([[5, 0]])
    clocks = np.array([[0.4, 2.0]])
    out = vehicle_attributes(speeds, caps, used, clocks, "raw")
    assert out.shape == (1, 2, 4)
    assert np.allclose(out[0, :, 0], [0.5, 1.0])
    assert np.allclose(out[0, :, 1], [20.0, 40.0])
    assert np.allclose(out[0, :, 2], [5.0, 0.0])
    assert np.allclose(out[0, :, 3], [0.2, 1.0])  # clock / max(1, 2.0)


def test_vehicle_attributes_unit():
    speeds = np.array([[0.5, 1.0]])
    caps = np.array([[20, 40]])
    used = np.array([[5, 0]])
    clocks = np.array([[0.4, 0.8]])  # max below 1 -> divide by 1
    out = vehicle_attributes(speeds, caps, used, clocks, "unit")
    assert np.allclose(out[0, :, 1], [0.5, 1.0])
    assert np.allclose(out[0, :, 2], [0.125, 0.0])
    assert np.allclose(out[0, :, 3], [0.4, 0.8])


# ---------------------------------------------------------------------------
# Encoders
# ---------------------------------------------------------------------------

def f64_params(cfg, seed=3):
    return init_parameters(cfg, seed, dtype=np.float64)


def test_encode_nodes_single_matches_batch(tiny_model_config, tiny_instance):
    ps = f64_params(tiny_model_config)
    single = encode_nodes(ps, tiny_instance).data
    coords = tiny_instance.all_coords()[None].repeat(2, axis=0)
    demands0 = np.concatenate([[0], tiny_instance.demands]).astype(np.float64)[None].repeat(2, axis=0)
    edges = edge_features_for(tiny_instance, tiny_model_config)[None].repeat(2, axis=0)
    batch = encode_nodes_batch(ps, coords, demands0, edges).data
    assert np.array_equal(batch[0], batch[1])
    assert np.allclose(single, batch[0], atol=1e-12)


def test_encode_nodes_plain_stack_replication(tiny_instance):
    """Single layer, fusion off: the full forward recomputed with raw numpy."""
    cfg = ModelConfig(embed_dim=8, head_count=2, encoder_layers=1,
                      dual_modality=False, knn_k=4)
    ps = f64_params(cfg)
    got = encode_nodes(ps, tiny_instance).data

    p = {n: t.data for n, t in ps.params.items()}
    coords = tiny_instance.all_coords()
    demands0 = np.concatenate([[0], tiny_instance.demands]).astype(np.float64)
    feats = np.concatenate([coords, demands0[:, None]], axis=1)
    h = feats @ p["node_embed.w"]
    h[0] += p["depot_token"]

    def mha(x, prefix, heads=2):
        d = x.shape[-1]
        dh = d // heads
        q, k, v = (x @ p[f"{prefix}.w_{n}"] for n in "qkv")
        outs = []
        for hd in range(heads):
            sl = slice(hd * dh, (hd + 1) * dh)
            sc = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
            outs.append(ref_softmax(sc, -1) @ v[:, sl])
        return np.concatenate(outs, axis=-1) @ p[f"{prefix}.w_o"]

    def bn_inference(x):
        return x / np.sqrt(1.0 + 1e-5)  # fresh buffers: mean 0, var 1, identity affine

    h = bn_inference(h + mha(h, "enc0.attn"))
    ff = np.maximum(h @ p["enc0.ff.w1"], 0.0) @ p["enc0.ff.w2"]
    h = bn_inference(h + ff)
    assert np.allclose(got, h, atol=1e-12)


def test_dual_modality_needs_edges(tiny_model_config, tiny_instance):
    ps = f64_params(tiny_model_config)
    coords = tiny_instance.all_coords()[None]
    demands0 = np.concatenate([[0], tiny_instance.demands]).astype(np.float64)[None]
    with pytest.raises(ValidationError):
        encode_nodes_batch(ps, coords, demands0, None)


def test_identical_vehicles_get_identical_rows(tiny_model_config):
    inst = make_line_instance([0.2, 0.4, 0.6, 0.8], demands=[2, 3, 4, 2],
                              capacities=[30, 30, 30], speeds=[1.0, 1.0, 1.0])
    ps = f64_params(tiny_model_config)
    node_emb = encode_nodes(ps, inst)
    veh = encode_vehicles(ps, init_state(inst), node_emb).data
    assert np.allclose(veh[0], veh[1], atol=1e-12)
    assert np.allclose(veh[0], veh[2], atol=1e-12)


def test_served_customers_cannot_influence_vehicle_encoding(tiny_model_config, tiny_instance):
    ps = f64_params(tiny_model_config)
    node_emb = encode_nodes(ps, tiny_instance)
    m = tiny_instance.n_vehicles
    s = tiny_instance.n_customers + 1
    attrs = vehicle_attributes(tiny_instance.speeds[None], tiny_instance.capacities[None],
                               np.zeros((1, m)), np.zeros((1, m)), "unit")
    last = np.zeros((1, m), dtype=np.int64)
    served = np.zeros((1, s), dtype=bool)
    served[0, 3] = True

    base = encode_vehicles_batch(ps, nx.reshape(node_emb, (1, s, -1)), attrs, last, served).data
    poked = node_emb.data.copy()
    poked[3] += 17.0  # served row: key and value both hidden
    redo = encode_vehicles_batch(ps, nx.constant(poked[None]), attrs, last, served).data
    assert np.array_equal(base, redo)

    served_all = np.zeros((1, s), dtype=bool)
    served_all[0, 1:] = True  # depot key always remains
    out = encode_vehicles_batch(ps, nx.reshape(node_emb, (1, s, -1)), attrs, last, served_all).data
    assert np.all(np.isfinite(out))


# ---------------------------------------------------------------------------
# Decoder
# ---------------------------------------------------------------------------

def test_pfca_none_is_passthrough(tiny_model_config):
    rng = np.random.default_rng(4)
    n = nx.constant(rng.standard_normal((5, 8)))
    out = pfca_update(n, None)
    assert out is n


def test_pfca_recomputation():
    rng = np.random.default_rng(5)
    d = 4
    n = rng.standard_normal((6, d))
    v = rng.standard_normal((1, d))
    got = pfca_update(nx.constant(n), nx.constant(v)).data
    scores = (n @ v.T) / math.sqrt(d)
    attn = ref_softmax(scores, -1)  # single key: every weight is exactly 1
    assert np.allclose(attn, 1.0)
    assert np.allclose(got, attn @ v + n, atol=1e-12)


def test_pair_logits_recompute_and_clip(tiny_model_config):
    rng = np.random.default_rng(6)
    m, s, d = 3, 6, 8
    vemb = rng.standard_normal((m, d)) * 5.0
    nemb = rng.standard_normal((s, d)) * 5.0
    mask = np.ones((m, s), dtype=bool)
    mask[0, 0] = False
    mask[2, 4] = False
    out = pair_logits(nx.constant(vemb), nx.constant(nemb), mask, logit_clip=10.0).data
    expect = 10.0 * np.tanh(vemb @ nemb.T / math.sqrt(d))
    finite = mask
    assert np.allclose(out[finite], expect[finite], atol=1e-12)
    assert np.all(np.isneginf(out[~finite]))
    assert np.abs(out[finite]).max() <= 10.0


def test_pair_logits_all_masked_raises():
    rng = np.random.default_rng(7)
    vemb = nx.constant(rng.standard_normal((2, 4)))
    nemb = nx.constant(rng.standard_normal((3, 4)))
    with pytest.raises(ValidationError):
        pair_logits(vemb, nemb, np.zeros((2, 3), dtype=bool))


def test_action_probabilities_flat_softmax():
    rng = np.random.default_rng(8)
    m, s = 2, 4
    vemb = rng.standard_normal((m, 8))
    nemb = rng.standard_normal((s, 8))
    mask = np.ones((m, s), dtype=bool)
    mask[1, 2] = False
    logits = pair_logits(nx.constant(vemb), nx.constant(nemb), mask)
    probs = action_probabilities(logits).data
    assert probs.shape == (m, s)
    assert probs[1, 2] == 0.0
    assert abs(probs.sum() - 1.0) < 1e-9
    ref = ref_softmax(logits.data.reshape(-1)).reshape(m, s)
    assert np.allclose(probs, ref, atol=1e-12)

    batched = nx.reshape(logits, (1, m, s))
    logp = action_log_probabilities(batched).data
    assert np.allclose(np.exp(logp[0]), probs.reshape(-1), atol=1e-12)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, tiny_model_config):
    for dtype in (np.float32, np.float64):
        ps = init_parameters(tiny_model_config, seed=9, dtype=dtype)
        # Make the buffers non-trivial so the round trip covers them too.
        for t in ps.buffers.values():
            t.data = t.data + 0.25
        path = str(tmp_path / f"ckpt_{np.dtype(dtype).name}.bin")
        save_checkpoint(ps, path)
        back, cfg = load_checkpoint(path)
        assert cfg == tiny_model_config
        assert np.dtype(back.dtype) == np.dtype(dtype)
        assert list(back.params) == list(ps.params)
        for name in ps.params:
            assert back.params[name].data.dtype == ps.params[name].data.dtype
            assert np.array_equal(back.params[name].data, ps.params[name].data), name
        for name in ps.buffers:
            assert np.array_equal(back.buffers[name].data, ps.buffers[name].data), name


def test_checkpoint_rejects_corruption(tmp_path, tiny_model_config):
    ps = init_parameters(tiny_model_config, seed=10)
    path = tmp_path / "ckpt.bin"
    save_checkpoint(ps, str(path))
    blob = bytearray(path.read_bytes())

    flipped = tmp_path / "flipped.bin"
    bad = bytearray(blob)
    bad[-1] ^= 0xFF  # payload byte: checksum must catch it
    flipped.write_bytes(bytes(bad))
    with pytest.raises(FileFormatError):
        load_checkpoint(str(flipped))

    truncated = tmp_path / "short.bin"
    truncated.write_bytes(bytes(blob[: len(blob) // 2]))
    with pytest.raises(FileFormatError):
        load_checkpoint(str(truncated))

    notckpt = tmp_path / "not.bin"
    notckpt.write_bytes(b"plainly not a checkpoint")
    with pytest.raises(FileFormatError):
        load_checkpoint(str(notckpt))

    with pytest.raises(FileFormatError):
        load_checkpoint(str(tmp_path / "missing.bin"))


def test_checkpoint_bytes_deterministic(tmp_path, tiny_model_config):
    ps = init_parameters(tiny_model_config, seed=11)
    a = tmp_path / "a.bin"
    b = tmp_path / "b.bin"
    save_checkpoint(ps, str(a))
    save_checkpoint(ps, str(b))
    assert a.read_bytes() == b.read_bytes()


# ---------------------------------------------------------------------------
# Full forward sanity on generated instances
# ---------------------------------------------------------------------------

def test_forward_chain_is_finite_on_generated_instances(tiny_model_config):
    ps = init_parameters(tiny_model_config, seed=12)
    for i in range(3):
        inst = generate_instance(GenConfig(n_customers=9, n_vehicles=3, seed=40 + i))
        node_emb = encode_nodes(ps, inst)
        state = init_state(inst)
        veh = encode_vehicles(ps, state, node_emb)
        mask = action_mask(state)
        logits = pair_logits(veh, node_emb, mask, tiny_model_config.logit_clip)
        probs = action_probabilities(logits).data
        assert np.isfinite(probs).all()
        assert probs[~mask].max(initial=0.0) == 0.0
        assert abs(probs.sum() - 1.0) < 1e-5
