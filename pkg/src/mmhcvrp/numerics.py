"""Dense-tensor engine with reverse-mode differentiation.

Just enough machinery for an attention policy: affine maps, multi-head
attention, batch normalization, elementwise nonlinearities, softmax,
reductions, and a handful of gather/scatter ops.  Arrays are plain numpy;
gradients are produced by a tape that records one backward closure per
primitive and replays them in exact reverse execution order.

Two precisions are supported: float64 for correctness tests and gradient
checks, float32 for training.  In float32 the masked-logit value is a large
negative sentinel instead of -inf so that softmax backward stays NaN-free.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import NumericError, ValidationError

Array = np.ndarray

# Sentinel for masked logits in float32 mode; float64 uses true -inf.
NEG_SENTINEL_F32 = -1.0e30
_MASKED_THRESHOLD = -1.0e29


def neg_inf(dtype) -> float:
    return NEG_SENTINEL_F32 if np.dtype(dtype) == np.float32 else -np.inf


class Tensor:
    """A dense array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: Array | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def constant(data, dtype=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=False)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


_ACTIVE_TAPES: list["AdjointTape"] = []


class AdjointTape:
    """Ordered record of executed primitives for one backward pass.

    Backward closures run in exact reverse execution order; fan-out
    gradients accumulate additively.
    """

    __slots__ = ("ops",)

    def __init__(self):
        self.ops: list[Callable[[], None]] = []

    def __enter__(self) -> "AdjointTape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE_TAPES.pop()
        assert popped is self

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise NumericError("backward requires a scalar loss")
        if not np.all(np.isfinite(loss.data)):
            raise NumericError("backward called on a non-finite loss")
        loss.grad = np.ones_like(loss.data)
        for fn in reversed(self.ops):
            fn()


def _accum(t: Tensor, g: Array) -> None:
    t.grad = g if t.grad is None else t.grad + g


def _record(out: Tensor, inputs: Sequence[Tensor], backward: Callable[[], None]) -> Tensor:
    if _ACTIVE_TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE_TAPES[-1].ops.append(backward)
    return out


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcasted gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Arithmetic primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def bw():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _record(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def bw():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)

    def bw():
        if out.grad is not None and a.requires_grad:
            _accum(a, out.grad * c)

    return _record(out, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading axes broadcast, operands must be >= 2-D."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValidationError("matmul operands must have at least 2 axes")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValidationError(f"matmul inner dims disagree: {a.data.shape} @ {b.data.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def bw():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            ga = np.matmul(g, b.data.swapaxes(-1, -2))
            _accum(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(a.data.swapaxes(-1, -2), g)
            _accum(b, _unbroadcast(gb, b.data.shape))

    return _record(out, (a, b), bw)


def matmul_acc64(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product accumulated in float64, rounded back to the operand dtype.

    Used where the contracted axis indexes a permutable set (attention keys):
    native float32 accumulation would make the result depend on the ordering
    of that set. The backward pass stays in the native dtype.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValidationError("matmul operands must have at least 2 axes")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValidationError(f"matmul inner dims disagree: {a.data.shape} @ {b.data.shape}")
    out_dtype = np.result_type(a.data.dtype, b.data.dtype)
    prod = np.matmul(a.data.astype(np.float64, copy=False),
                     b.data.astype(np.float64, copy=False))
    out = Tensor(np.asarray(prod, dtype=out_dtype))

    def bw():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            ga = np.matmul(g, b.data.swapaxes(-1, -2))
            _accum(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(a.data.swapaxes(-1, -2), g)
            _accum(b, _unbroadcast(gb, b.data.shape))

    return _record(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map along the feature (last) axis."""
    out = matmul(x, w)
    if bias is not None:
        out = add(out, bias)
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def bw():
        if out.grad is not None and a.requires_grad:
            _accum(a, out.grad.reshape(a.data.shape))

    return _record(out, (a,), bw)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(np.transpose(a.data, axes))
    inv = tuple(np.argsort(axes))

    def bw():
        if out.grad is not None and a.requires_grad:
            _accum(a, np.transpose(out.grad, inv))

    return _record(out, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw():
        g = out.grad
        if g is None:
            return
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, g[tuple(idx)])

    return _record(out, tuple(tensors), bw)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size if axis is None else a.data.shape[axis]

    def bw():
        g = out.grad
        if g is None or not a.requires_grad:
            return
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g / count, a.data.shape).copy())

    return _record(out, (a,), bw)


def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bw():
        g = out.grad
        if g is None or not a.requires_grad:
            return
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# Nonlinearities
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))

    def bw():
        if out.grad is not None and a.requires_grad:
            _accum(a, out.grad * (a.data > 0))

    return _record(out, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y)

    def bw():
        if out.grad is not None and a.requires_grad:
            _accum(a, out.grad * (1.0 - y * y))

    return _record(out, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    y = y.astype(x.dtype, copy=False)
    out = Tensor(y)

    def bw():
        if out.grad is not None and a.requires_grad:
            _accum(a, out.grad * (y * (1.0 - y)))

    return _record(out, (a,), bw)


def _check_not_all_masked(mx: Array, dtype) -> None:
    if np.dtype(dtype) == np.float32:
        bad = mx <= _MASKED_THRESHOLD
    else:
        bad = np.isneginf(mx)
    if np.any(bad):
        raise NumericError("softmax over an axis where every entry is masked")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax; masked (-inf / sentinel) entries map to probability 0.

    The normalizer is accumulated in float64 so that reordering the reduced
    axis (a permuted key set) cannot perturb float32 results.
    """
    x = a.data
    mx = np.max(x, axis=axis, keepdims=True)
    _check_not_all_masked(mx, x.dtype)
    z = np.exp(x - mx)
    y = np.asarray(z / z.sum(axis=axis, keepdims=True, dtype=np.float64), dtype=x.dtype)
    out = Tensor(y)

    def bw():
        g = out.grad
        if g is None or not a.requires_grad:
            return
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - inner))

    return _record(out, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    mx = np.max(x, axis=axis, keepdims=True)
    _check_not_all_masked(mx, x.dtype)
    z = x - mx
    with np.errstate(divide="ignore"):  # log of exact zero rows never occurs; exp underflow fine
        lse = np.log(np.exp(z).sum(axis=axis, keepdims=True, dtype=np.float64))
    y = np.asarray(z - lse, dtype=x.dtype)
    out = Tensor(y)

    def bw():
        g = out.grad
        if g is None or not a.requires_grad:
            return
        probs = np.exp(y)
        _accum(a, g - probs * g.sum(axis=axis, keepdims=True))

    return _record(out, (a,), bw)


def masked_fill(a: Tensor, mask: Array, value: float) -> Tensor:
    """Replace entries where ``mask`` is True; their gradient is zero."""
    out = Tensor(np.where(mask, np.asarray(value, dtype=a.data.dtype), a.data))

    def bw():
        if out.grad is not None and a.requires_grad:
            _accum(a, out.grad * ~mask)

    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# Gather / scatter
# ---------------------------------------------------------------------------

def gather_rows(a: Tensor, idx: Array) -> Tensor:
    """Select rows along axis 0; backward scatter-adds."""
    out = Tensor(a.data[idx])

    def bw():
        if out.grad is not None and a.requires_grad:
            g = np.zeros_like(a.data)
            np.add.at(g, idx, out.grad)
            _accum(a, g)

    return _record(out, (a,), bw)


def take_per_row(a: Tensor, idx: Array) -> Tensor:
    """a: (B, S, d), idx: (B, T) -> (B, T, d), out[b, t] = a[b, idx[b, t]]."""
    b = a.data.shape[0]
    out = Tensor(np.take_along_axis(a.data, idx[:, :, None], axis=1))
    rows = np.arange(b)[:, None]

    def bw():
        if out.grad is not None and a.requires_grad:
            g = np.zeros_like(a.data)
            np.add.at(g, (rows, idx), out.grad)
            _accum(a, g)

    return _record(out, (a,), bw)


def pick_per_row(a: Tensor, idx: Array) -> Tensor:
    """a: (B, F), idx: (B,) -> (B,), out[b] = a[b, idx[b]]."""
    rows = np.arange(a.data.shape[0])
    out = Tensor(a.data[rows, idx])

    def bw():
        if out.grad is not None and a.requires_grad:
            g = np.zeros_like(a.data)
            g[rows, idx] = out.grad
            _accum(a, g)

    return _record(out, (a,), bw)


def scatter_rows(a: Tensor, idx: Array, n_rows: int) -> Tensor:
    """Place rows of ``a`` at positions ``idx`` of a zero (n_rows, ...) tensor."""
    shape = (n_rows,) + a.data.shape[1:]
    data = np.zeros(shape, dtype=a.data.dtype)
    data[idx] = a.data
    out = Tensor(data)

    def bw():
        if out.grad is not None and a.requires_grad:
            _accum(a, out.grad[idx])

    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
    update_running: bool = True,
) -> Tensor:
    """Normalize each feature channel over all leading axes jointly.

    Training mode uses batch statistics (and optionally updates the running
    buffers in place); inference mode uses the running statistics.
    """
    d = x.data.shape[-1]
    n = x.data.size // d if d else 0
    if n == 0:
        raise ValidationError("batch_norm over a zero-size normalization axis")
    axes = tuple(range(x.data.ndim - 1))

    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if update_running:
            unbias = n / (n - 1) if n > 1 else 1.0
            running_mean.data = (1 - momentum) * running_mean.data + momentum * mu
            running_var.data = (1 - momentum) * running_var.data + momentum * var * unbias
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv_std
        out = Tensor(gamma.data * xhat + beta.data)

        def bw():
            g = out.grad
            if g is None:
                return
            if gamma.requires_grad:
                _accum(gamma, (g * xhat).sum(axis=axes))
            if beta.requires_grad:
                _accum(beta, g.sum(axis=axes))
            if x.requires_grad:
                gx_hat = g * gamma.data
                mean_g = gx_hat.mean(axis=axes)
                mean_gx = (gx_hat * xhat).mean(axis=axes)
                _accum(x, inv_std * (gx_hat - mean_g - xhat * mean_gx))

        return _record(out, (x, gamma, beta), bw)

    inv_std = 1.0 / np.sqrt(running_var.data + eps)
    xhat = (x.data - running_mean.data) * inv_std
    out = Tensor(gamma.data * xhat + beta.data)

    def bw_eval():
        g = out.grad
        if g is None:
            return
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=axes))
        if x.requires_grad:
            _accum(x, g * (gamma.data * inv_std))

    return _record(out, (x, gamma, beta), bw_eval)


# ---------------------------------------------------------------------------
# Multi-head attention
# ---------------------------------------------------------------------------

def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    params: Mapping[str, Tensor],
    n_heads: int = 8,
    mask: Array | None = None,
) -> Tensor:
    """Scaled dot-product attention with per-head projections.

    ``params`` must provide w_q, w_k, w_v, w_o, each (d, d).  ``mask`` is an
    additive array broadcastable to the score shape (B, heads, Sq, Sk); use
    0 for allowed and the dtype's masked value for forbidden keys.  Heads
    are concatenated and projected by w_o.
    """
    d = q.data.shape[-1]
    if d % n_heads:
        raise ValidationError(f"feature dim {d} not divisible by {n_heads} heads")
    dh = d // n_heads

    qp = matmul(q, params["w_q"])
    kp = matmul(k, params["w_k"])
    vp = matmul(v, params["w_v"])

    bsz, sq = qp.data.shape[0], qp.data.shape[1]
    sk = kp.data.shape[1]
    qh = transpose(reshape(qp, (bsz, sq, n_heads, dh)), (0, 2, 1, 3))
    kh = transpose(reshape(kp, (bsz, sk, n_heads, dh)), (0, 2, 1, 3))
    vh = transpose(reshape(vp, (bsz, sk, n_heads, dh)), (0, 2, 1, 3))

    scores = scale(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if mask is not None:
        if np.broadcast_shapes(mask.shape, scores.data.shape) != scores.data.shape:
            raise ValidationError(f"attention mask shape {mask.shape} does not broadcast to {scores.data.shape}")
        scores = add(scores, constant(mask, dtype=scores.data.dtype))
    attn = softmax(scores, axis=-1)
    ctx = matmul_acc64(attn, vh)  # contraction runs over the key set
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (bsz, sq, d))
    return matmul(ctx, params["w_o"])


# ---------------------------------------------------------------------------
# Gradient utilities
# ---------------------------------------------------------------------------

def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def global_grad_norm(grads: Iterable[Array]) -> float:
    total = 0.0
    for g in grads:
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return math.sqrt(total)


def gradient_check(
    function: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    probe_count: int,
    h: float = 1e-5,
    rng: np.random.Generator | None = None,
    rel_floor: float = 1e-3,
) -> float:
    """Compare reverse-mode gradients with central finite differences.

    Probes ``probe_count`` random parameter coordinates (weighted by tensor
    size) and returns the maximum relative error; ``rel_floor`` bounds the
    denominator so near-zero coordinates are judged on absolute error.
    Requires float64 parameters for meaningful results.
    """
    rng = rng or np.random.default_rng(0)
    names = [n for n, p in params.items() if p.requires_grad]
    if not names:
        raise ValidationError("gradient_check needs at least one trainable tensor")

    zero_grads(params[n] for n in names)
    with AdjointTape() as tape:
        loss = function()
    if loss.data.size != 1 or not np.all(np.isfinite(loss.data)):
        raise NumericError("gradient_check requires a finite scalar function value")
    tape.backward(loss)
    analytic = {
        n: (params[n].grad.copy() if params[n].grad is not None else np.zeros_like(params[n].data))
        for n in names
    }
    zero_grads(params[n] for n in names)

    sizes = np.array([params[n].data.size for n in names], dtype=np.float64)
    weights = sizes / sizes.sum()
    worst = 0.0
    for _ in range(probe_count):
        name = names[int(rng.choice(len(names), p=weights))]
        p = params[name]
        flat = p.data.reshape(-1)
        i = int(rng.integers(flat.size))
        orig = flat[i]
        flat[i] = orig + h
        up = float(function().data)
        flat[i] = orig - h
        down = float(function().data)
        flat[i] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise NumericError(f"non-finite value while probing {name}[{i}]")
        fd = (up - down) / (2.0 * h)
        an = float(analytic[name].reshape(-1)[i])
        rel = abs(an - fd) / max(abs(an), abs(fd), rel_floor)
        worst = max(worst, rel)
    return worst
