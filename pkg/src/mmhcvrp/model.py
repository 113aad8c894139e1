"""Attention policy for the min-max heterogeneous fleet routing problem.

Two encoders and a pairing decoder.  The node encoder runs once per
instance: a residual self-attention stack over node attributes, optionally
fused with projected edge (distance) features through a gated cross
attention.  The vehicle encoder runs every decoding step on the current
fleet attributes.  The decoder injects the previously selected vehicle's
embedding into all node embeddings with a weight-free attention update,
then scores every vehicle-node pair with a clipped dot product.

All forward functions exist in two forms: a batched core operating on a
leading batch axis (used by rollouts) and a single-instance wrapper.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import numerics as nx
from .errors import FileFormatError, NumericError, ValidationError
from .mdp import FleetState
from .numerics import Tensor
from .problem import Instance, distance_matrix

EDGE_FEATURE_MODES = ("knn_sorted", "full_row")
ATTR_SCALE_MODES = ("raw", "unit")

CHECKPOINT_MAGIC = b"MHVC"
CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; stored alongside parameters in checkpoints."""

    embed_dim: int = 128
    head_count: int = 8
    encoder_layers: int = 3
    logit_clip: float = 10.0
    edge_feature_mode: str = "knn_sorted"
    knn_k: int = 16
    # Node count pinned by full_row mode (the edge projection then has one
    # input column per node); unused in knn_sorted mode.
    full_row_size: int | None = None
    dual_modality: bool = True
    pfca: bool = True
    # Vehicle attribute featurization: "raw" feeds capacities as-is, "unit"
    # divides capacity/load by the fleet's max capacity.  The elapsed-time
    # attribute is always divided by max(1, per-instance max) to stay bounded.
    # Raw capacities (~20..40) saturate the clipped-tanh scores at init and
    # stall learning at short horizons, so unit is the default.
    attr_scale: str = "unit"

    def validate(self) -> None:
        if self.embed_dim <= 0 or self.embed_dim % self.head_count != 0:
            raise ValidationError(
                f"embed_dim {self.embed_dim} must be a positive multiple of head_count {self.head_count}"
            )
        if self.encoder_layers < 1:
            raise ValidationError("encoder_layers must be >= 1")
        if self.edge_feature_mode not in EDGE_FEATURE_MODES:
            raise ValidationError(f"unknown edge_feature_mode {self.edge_feature_mode!r}")
        if self.edge_feature_mode == "knn_sorted" and self.knn_k < 1:
            raise ValidationError("knn_k must be >= 1")
        if self.edge_feature_mode == "full_row" and (self.full_row_size is None or self.full_row_size < 2):
            raise ValidationError("full_row mode needs full_row_size = node count (depot included)")
        if self.attr_scale not in ATTR_SCALE_MODES:
            raise ValidationError(f"unknown attr_scale {self.attr_scale!r}")
        if self.logit_clip <= 0:
            raise ValidationError("logit_clip must be positive")

    @property
    def edge_dim(self) -> int:
        if self.edge_feature_mode == "knn_sorted":
            return self.knn_k
        return int(self.full_row_size)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: Mapping) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(ModelConfig)}
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown model config fields: {sorted(extra)}")
        cfg = ModelConfig(**dict(d))
        cfg.validate()
        return cfg


def _parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Stable name -> shape map; insertion order fixes init and checkpoint layout."""
    d = config.embed_dim
    shapes: dict[str, tuple[int, ...]] = {
        "node_embed.w": (3, d),
        "depot_token": (d,),
    }
    if config.dual_modality:
        shapes["edge_embed.w"] = (config.edge_dim, d)
    for layer in range(config.encoder_layers):
        p = f"enc{layer}"
        for n in ("w_q", "w_k", "w_v", "w_o"):
            shapes[f"{p}.attn.{n}"] = (d, d)
        shapes[f"{p}.bn1.gamma"] = (d,)
        shapes[f"{p}.bn1.beta"] = (d,)
        shapes[f"{p}.ff.w1"] = (d, 4 * d)
        shapes[f"{p}.ff.w2"] = (4 * d, d)
        shapes[f"{p}.bn2.gamma"] = (d,)
        shapes[f"{p}.bn2.beta"] = (d,)
    if config.dual_modality:
        for n in ("w_q", "w_k", "w_v", "w_o"):
            shapes[f"fuse.attn.{n}"] = (d, d)
        shapes["fuse.gate.w"] = (2 * d, 1)
    shapes["veh.w3"] = (4, 4 * d)
    shapes["veh.w4"] = (4 * d, d)
    shapes["veh.w_pe"] = (d, d)
    for n in ("w_q", "w_k", "w_v", "w_o"):
        shapes[f"veh.self.{n}"] = (d, d)
    for n in ("w_q", "w_k", "w_v", "w_o"):
        shapes[f"veh.cross.{n}"] = (d, d)
    return shapes


def _buffer_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = config.embed_dim
    out: dict[str, tuple[int, ...]] = {}
    for layer in range(config.encoder_layers):
        for bn in ("bn1", "bn2"):
            out[f"enc{layer}.{bn}.mean"] = (d,)
            out[f"enc{layer}.{bn}.var"] = (d,)
    return out


@dataclass
class ParameterSet:
    """Named trainable tensors plus normalization buffers for one config."""

    config: ModelConfig
    dtype: np.dtype
    params: dict[str, Tensor]
    buffers: dict[str, Tensor]

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def trainable(self) -> dict[str, Tensor]:
        return self.params

    def validate(self) -> None:
        expected = _parameter_shapes(self.config)
        if list(self.params) != list(expected):
            raise ValidationError("parameter names do not match the config's layout")
        for name, shape in expected.items():
            t = self.params[name]
            if t.data.shape != shape:
                raise ValidationError(f"parameter {name} has shape {t.data.shape}, expected {shape}")
            if not np.all(np.isfinite(t.data)):
                raise NumericError(f"parameter {name} contains non-finite values")


def init_parameters(config: ModelConfig, seed: int, dtype=np.float32) -> ParameterSet:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights in fixed name order.

    The depot token starts at zero; normalization scales start at identity.
    """
    config.validate()
    dtype = np.dtype(dtype)
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in _parameter_shapes(config).items():
        if name == "depot_token":
            data = np.zeros(shape)
        elif name.endswith(".gamma"):
            data = np.ones(shape)
        elif name.endswith(".beta"):
            data = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = nx.parameter(data, dtype=dtype)
    buffers = {}
    for name, shape in _buffer_shapes(config).items():
        init = np.ones(shape) if name.endswith(".var") else np.zeros(shape)
        buffers[name] = nx.constant(init, dtype=dtype)
    return ParameterSet(config=config, dtype=dtype, params=params, buffers=buffers)


def _sub(params: ParameterSet, prefix: str) -> dict[str, Tensor]:
    p = params.params
    return {n: p[f"{prefix}.{n}"] for n in ("w_q", "w_k", "w_v", "w_o")}


# ---------------------------------------------------------------------------
# Edge features
# ---------------------------------------------------------------------------

def edge_features(dist: np.ndarray, mode: str, k: int = 16) -> np.ndarray:
    """Per-node raw edge feature rows derived from the distance matrix.

    knn_sorted: the k smallest distances to other nodes, ascending, which is
    relabeling-invariant and independent of the node count.  full_row: the
    node's full distance row (self included), which pins the node count.
    """
    s = dist.shape[0]
    if mode == "knn_sorted":
        if k > s - 1:
            raise ValidationError(f"knn edge features need k <= {s - 1} other nodes, got k={k}")
        order = np.sort(dist, axis=1)
        return order[:, 1 : k + 1]  # column 0 is the self distance 0
    if mode == "full_row":
        return dist.copy()
    raise ValidationError(f"unknown edge feature mode {mode!r}")


def edge_features_for(instance: Instance, config: ModelConfig, dist: np.ndarray | None = None) -> np.ndarray:
    if dist is None:
        dist = distance_matrix(instance)
    if config.edge_feature_mode == "full_row" and dist.shape[0] != config.full_row_size:
        raise ValidationError(
            f"full_row edge mode was configured for {config.full_row_size} nodes, instance has {dist.shape[0]}"
        )
    return edge_features(dist, config.edge_feature_mode, config.knn_k)


# ---------------------------------------------------------------------------
# Node encoder
# ---------------------------------------------------------------------------

def encode_nodes_batch(
    params: ParameterSet,
    coords: np.ndarray,
    demands0: np.ndarray,
    edge_raw: np.ndarray | None,
    training: bool = False,
    update_running: bool = False,
) -> Tensor:
    """coords (B, S, 2), demands0 (B, S) with 0 at the depot row -> (B, S, d)."""
    cfg = params.config
    p = params.params
    dt = params.dtype
    b, s, _ = coords.shape

    feats = np.concatenate([coords, demands0[:, :, None]], axis=2).astype(dt)
    h = nx.matmul(nx.constant(feats), p["node_embed.w"])
    depot_rows = np.zeros((1, s, 1), dtype=dt)
    depot_rows[0, 0, 0] = 1.0
    h = nx.add(h, nx.mul(nx.constant(depot_rows), nx.reshape(p["depot_token"], (1, 1, cfg.embed_dim))))

    for layer in range(cfg.encoder_layers):
        pre = f"enc{layer}"
        attn = nx.multi_head_attention(h, h, h, _sub(params, f"{pre}.attn"), n_heads=cfg.head_count)
        h = nx.batch_norm(
            nx.add(h, attn),
            p[f"{pre}.bn1.gamma"], p[f"{pre}.bn1.beta"],
            params.buffers[f"{pre}.bn1.mean"], params.buffers[f"{pre}.bn1.var"],
            training=training, update_running=update_running,
        )
        ff = nx.matmul(nx.relu(nx.matmul(h, p[f"{pre}.ff.w1"])), p[f"{pre}.ff.w2"])
        h = nx.batch_norm(
            nx.add(h, ff),
            p[f"{pre}.bn2.gamma"], p[f"{pre}.bn2.beta"],
            params.buffers[f"{pre}.bn2.mean"], params.buffers[f"{pre}.bn2.var"],
            training=training, update_running=update_running,
        )

    if cfg.dual_modality:
        if edge_raw is None:
            raise ValidationError("dual-modality encoder needs edge features")
        e = nx.matmul(nx.constant(edge_raw.astype(dt)), p["edge_embed.w"])
        cross = nx.multi_head_attention(h, e, e, _sub(params, "fuse.attn"), n_heads=cfg.head_count)
        gate = nx.sigmoid(nx.matmul(nx.concat([cross, h], axis=-1), p["fuse.gate.w"]))
        h = nx.add(h, nx.mul(gate, cross))

    if not np.all(np.isfinite(h.data)):
        raise NumericError("non-finite node embeddings")
    return h


def encode_nodes(
    params: ParameterSet,
    instance: Instance,
    dist: np.ndarray | None = None,
    training: bool = False,
    update_running: bool = False,
) -> Tensor:
    """Single-instance wrapper; returns the (S, d) node embedding."""
    if dist is None:
        dist = distance_matrix(instance)
    coords = instance.all_coords()[None]
    demands0 = np.concatenate([[0], instance.demands]).astype(np.float64)[None]
    edge_raw = edge_features_for(instance, params.config, dist)[None] if params.config.dual_modality else None
    out = encode_nodes_batch(params, coords, demands0, edge_raw, training=training, update_running=update_running)
    return nx.reshape(out, out.shape[1:])


# ---------------------------------------------------------------------------
# Vehicle encoder
# ---------------------------------------------------------------------------

def vehicle_attributes(
    speeds: np.ndarray,
    capacities: np.ndarray,
    used: np.ndarray,
    clocks: np.ndarray,
    attr_scale: str,
) -> np.ndarray:
    """Per-vehicle feature rows (speed, capacity, used capacity, elapsed time).

    Inputs are (B, M); the elapsed time is divided by max(1, per-instance max)
    so it stays bounded over long episodes.  "unit" scaling additionally
    divides the two capacity columns by the fleet's largest capacity.
    """
    clock_scale = np.maximum(1.0, clocks.max(axis=1, keepdims=True))
    cap = capacities.astype(np.float64)
    load = used.astype(np.float64)
    if attr_scale == "unit":
        cap_scale = cap.max(axis=1, keepdims=True)
        cap = cap / cap_scale
        load = load / cap_scale
    return np.stack([speeds, cap, load, clocks / clock_scale], axis=2)


def encode_vehicles_batch(
    params: ParameterSet,
    node_emb: Tensor,
    attrs: np.ndarray,
    last_idx: np.ndarray,
    served: np.ndarray,
) -> Tensor:
    """node_emb (B, S, d), attrs (B, M, 4), last_idx (B, M), served (B, S) -> (B, M, d).

    Served customers are hidden from the cross-attention keys/values; the
    depot key is never hidden.
    """
    cfg = params.config
    p = params.params
    dt = params.dtype

    m1 = nx.matmul(nx.relu(nx.matmul(nx.constant(attrs.astype(dt)), p["veh.w3"])), p["veh.w4"])
    pe = nx.take_per_row(node_emb, last_idx)
    m1 = nx.add(m1, nx.matmul(pe, p["veh.w_pe"]))

    m2 = nx.add(m1, nx.multi_head_attention(m1, m1, m1, _sub(params, "veh.self"), n_heads=cfg.head_count))

    key_mask = np.where(served[:, None, None, :], nx.neg_inf(dt), 0.0).astype(dt)
    cross = nx.multi_head_attention(m2, node_emb, node_emb, _sub(params, "veh.cross"),
                                    n_heads=cfg.head_count, mask=key_mask)
    out = nx.add(m2, cross)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("non-finite vehicle embeddings")
    return out


def encode_vehicles(params: ParameterSet, state: FleetState, node_emb: Tensor) -> Tensor:
    """Single-state wrapper; returns the (M, d) vehicle embedding."""
    inst = state.instance
    attrs = vehicle_attributes(
        inst.speeds[None], inst.capacities[None], state.used_capacity[None],
        state.clock[None], params.config.attr_scale,
    )
    served = np.zeros(inst.n_customers + 1, dtype=bool)
    served[1:] = state.remaining[1:] == 0
    out = encode_vehicles_batch(
        params,
        nx.reshape(node_emb, (1,) + node_emb.shape),
        attrs,
        state.last_node[None],
        served[None],
    )
    return nx.reshape(out, out.shape[1:])


# ---------------------------------------------------------------------------
# Decoder
# ---------------------------------------------------------------------------

def pfca_update_batch(node_emb: Tensor, selected_vehicle_embedding: Tensor | None) -> Tensor:
    """Weight-free update pushing the last-selected vehicle into every node row.

    node_emb (B, S, d); selected embedding (B, 1, d) or None for the first
    step (or when the mechanism is disabled), in which case the node
    embedding passes through untouched.
    """
    if selected_vehicle_embedding is None:
        return node_emb
    d = node_emb.shape[-1]
    scores = nx.scale(nx.matmul(node_emb, nx.transpose(selected_vehicle_embedding, (0, 2, 1))), 1.0 / math.sqrt(d))
    attn = nx.softmax(scores, axis=-1)
    return nx.add(nx.matmul(attn, selected_vehicle_embedding), node_emb)


def pfca_update(node_emb: Tensor, selected_vehicle_embedding: Tensor | None) -> Tensor:
    """Single-instance wrapper: node_emb (S, d), selected embedding (1, d) or None."""
    if selected_vehicle_embedding is None:
        return node_emb
    s, d = node_emb.shape
    out = pfca_update_batch(
        nx.reshape(node_emb, (1, s, d)),
        nx.reshape(selected_vehicle_embedding, (1, 1, d)),
    )
    return nx.reshape(out, (s, d))


def pair_logits_batch(vehicle_emb: Tensor, node_emb: Tensor, feasible: np.ndarray, logit_clip: float) -> Tensor:
    """Clipped pair scores: (B, M, d) x (B, S, d) -> (B, M, S); infeasible pairs masked."""
    d = vehicle_emb.shape[-1]
    dots = nx.scale(nx.matmul(vehicle_emb, nx.transpose(node_emb, (0, 2, 1))), 1.0 / math.sqrt(d))
    if not np.all(np.isfinite(dots.data)):
        raise NumericError("non-finite pair scores")
    beta = nx.scale(nx.tanh(dots), logit_clip)
    if not feasible.any():
        raise ValidationError("pair scoring with every vehicle-node pair masked")
    return nx.masked_fill(beta, ~feasible, nx.neg_inf(vehicle_emb.dtype))


def pair_logits(vehicle_emb: Tensor, node_emb: Tensor, mask: np.ndarray, logit_clip: float = 10.0) -> Tensor:
    """Single-instance wrapper: (M, d), (S, d), mask (M, S) -> (M, S)."""
    m, d = vehicle_emb.shape
    s = node_emb.shape[0]
    out = pair_logits_batch(
        nx.reshape(vehicle_emb, (1, m, d)),
        nx.reshape(node_emb, (1, s, d)),
        mask[None],
        logit_clip,
    )
    return nx.reshape(out, (m, s))


def action_probabilities(logits: Tensor) -> Tensor:
    """Softmax over the flattened vehicle-node grid, reshaped back.

    Accepts (M, S) or batched (B, M, S); masked pairs get probability 0.
    """
    shape = logits.shape
    if len(shape) == 2:
        flat = nx.reshape(logits, (1, shape[0] * shape[1]))
    else:
        flat = nx.reshape(logits, (shape[0], shape[1] * shape[2]))
    probs = nx.softmax(flat, axis=-1)
    return nx.reshape(probs, shape)


def action_log_probabilities(logits: Tensor) -> Tensor:
    """Log version of action_probabilities, batched (B, M, S) -> (B, M*S)."""
    shape = logits.shape
    flat = nx.reshape(logits, (shape[0], shape[1] * shape[2]))
    return nx.log_softmax(flat, axis=-1)


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

def save_checkpoint(params: ParameterSet, path: str) -> None:
    """Binary checkpoint: magic, JSON header, little-endian payload.

    The header records the config, every tensor's name/shape/dtype/offset,
    and a SHA-256 checksum of the payload.
    """
    payload = bytearray()
    manifest = []
    for kind, table in (("param", params.params), ("buffer", params.buffers)):
        for name, t in table.items():
            raw = np.ascontiguousarray(t.data).astype(t.data.dtype.newbyteorder("<"), copy=False).tobytes()
            manifest.append({
                "kind": kind,
                "name": name,
                "shape": list(t.data.shape),
                "dtype": str(t.data.dtype),
                "offset": len(payload),
                "nbytes": len(raw),
            })
            payload.extend(raw)
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": params.config.to_dict(),
        "dtype": str(np.dtype(params.dtype)),
        "manifest": manifest,
        "payload_sha256": hashlib.sha256(bytes(payload)).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(np.array(len(head), dtype="<u4").tobytes())
        f.write(head)
        f.write(bytes(payload))


def load_checkpoint(path: str) -> tuple[ParameterSet, ModelConfig]:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise FileFormatError(f"cannot read checkpoint {path}: {e}") from e
    if len(blob) < 8 or blob[:4] != CHECKPOINT_MAGIC:
        raise FileFormatError(f"{path} is not a checkpoint file")
    head_len = int(np.frombuffer(blob[4:8], dtype="<u4")[0])
    if len(blob) < 8 + head_len:
        raise FileFormatError(f"checkpoint {path} is truncated (header)")
    try:
        header = json.loads(blob[8 : 8 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FileFormatError(f"checkpoint {path} has a corrupt header: {e}") from e
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise FileFormatError(f"checkpoint {path} has unsupported format_version {header.get('format_version')}")
    payload = blob[8 + head_len :]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise FileFormatError(f"checkpoint {path} failed its payload checksum")

    config = ModelConfig.from_dict(header["config"])
    dtype = np.dtype(header["dtype"])
    expected_p = _parameter_shapes(config)
    expected_b = _buffer_shapes(config)
    params: dict[str, Tensor] = {}
    buffers: dict[str, Tensor] = {}
    for entry in header["manifest"]:
        name, kind = entry["name"], entry["kind"]
        expected = expected_p if kind == "param" else expected_b
        if name not in expected:
            raise FileFormatError(f"checkpoint {path} carries unknown tensor {name!r}")
        shape = tuple(entry["shape"])
        if shape != expected[name]:
            raise FileFormatError(
                f"checkpoint {path}: tensor {name} has shape {shape}, config implies {expected[name]}"
            )
        t_dtype = np.dtype(entry["dtype"])
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(payload):
            raise FileFormatError(f"checkpoint {path} is truncated (payload)")
        data = np.frombuffer(payload[start : start + n], dtype=t_dtype.newbyteorder("<")).astype(t_dtype)
        data = data.reshape(shape)
        if kind == "param":
            params[name] = nx.parameter(data.copy())
        else:
            buffers[name] = nx.constant(data.copy())
    missing = (set(expected_p) - set(params)) | (set(expected_b) - set(buffers))
    if missing:
        raise FileFormatError(f"checkpoint {path} is missing tensors: {sorted(missing)}")
    params = {n: params[n] for n in expected_p}
    buffers = {n: buffers[n] for n in expected_b}
    out = ParameterSet(config=config, dtype=dtype, params=params, buffers=buffers)
    out.validate()
    return out, config
