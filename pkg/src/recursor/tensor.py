"""Reverse-mode autodiff over float64 numpy arrays.

Every op records its parents and a backward closure on the tensor it
produces, so the implicit tape is the creation order of tensors.  Creation
order is a valid topological order, which makes backward a single reversed
sweep with no explicit graph object.  All math is float64 and all
reductions run in numpy's fixed left-to-right order, so repeated runs on
the same machine give bit-identical results.
"""

from __future__ import annotations

import numpy as np

_GRAD_ENABLED = True
_NODE_COUNTER = 0


class no_grad:
    """Context manager that disables tape recording (inference paths)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 array plus optional gradient and backward closure."""

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op=""):
        global _NODE_COUNTER
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(parents)
        self._backward_fn = backward_fn
        self.op = op
        self.node_id = _NODE_COUNTER  # creation index, doubles as topo order
        _NODE_COUNTER += 1

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, grad={self.requires_grad})"

    # ---- autodiff ----

    def backward(self, grad=None):
        """Accumulate gradients into every reachable tensor with requires_grad.

        Starts from this tensor, which must be scalar unless `grad` is given.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad requires a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)

        # Collect the reachable subgraph, then sweep in reverse creation order.
        seen = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if t.node_id in seen:
                continue
            seen[t.node_id] = t
            stack.extend(t._parents)

        grads = {self.node_id: grad}
        for node_id in sorted(seen, reverse=True):
            t = seen[node_id]
            g = grads.pop(node_id, None)
            if g is None:
                continue
            if t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g
            if t._backward_fn is None:
                continue
            parent_grads = t._backward_fn(g)
            for p, pg in zip(t._parents, parent_grads):
                if pg is None:
                    continue
                if p.node_id in grads:
                    grads[p.node_id] = grads[p.node_id] + pg
                else:
                    grads[p.node_id] = pg

    # ---- operators ----

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    if _GRAD_ENABLED and any(_tracked(p) for p in parents):
        return Tensor(data, parents=parents, backward_fn=backward_fn, op=op)
    return Tensor(data, op=op)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t._backward_fn is not None


# ---- primitive ops ----


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bw, "mul")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** exponent

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _make(out, (a,), bw, "pow")


def matmul(a, b) -> Tensor:
    """Matrix product for 2-D operands or batched 3-D operands."""
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def bw(g):
        if a.data.ndim == 2 and b.data.ndim == 2:
            return g @ b.data.T, a.data.T @ g
        # batched: [B, m, k] @ [B, k, n], either side may lack the batch dim
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _make(out, (a, b), bw, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (np.swapaxes(g, -1, -2),)

    return _make(np.swapaxes(a.data, -1, -2), (a,), bw, "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape

    def bw(g):
        return (g.reshape(old),)

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw, "sum")


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _make(out, (a,), bw, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), bw, "log")


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp with pass-through gradient strictly inside the bounds."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)

    def bw(g):
        inside = (a.data > lo) & (a.data < hi)
        return (g * inside,)

    return _make(out, (a,), bw, "clip")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # split by sign to avoid overflow in exp
    out = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-a.data)),
                   np.exp(a.data) / (1.0 + np.exp(a.data)))

    def bw(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), bw, "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), bw, "tanh")


def silu(a) -> Tensor:
    """x * sigmoid(x)."""
    a = as_tensor(a)
    s = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-a.data)),
                 np.exp(a.data) / (1.0 + np.exp(a.data)))
    out = a.data * s

    def bw(g):
        return (g * (s + a.data * s * (1.0 - s)),)

    return _make(out, (a,), bw, "silu")


def gelu(a) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    a = as_tensor(a)
    c = np.sqrt(2.0 / np.pi)
    x = a.data
    inner = c * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dt = (1.0 - t * t) * c * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _make(out, (a,), bw, "gelu")


def softmax(a, axis=-1) -> Tensor:
    """Numerically stable softmax: subtract the row max before exponentiating."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), bw, "softmax")


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def logsumexp(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out = (m + np.log(e.sum(axis=axis, keepdims=True))).squeeze(axis)

    def bw(g):
        p = e / e.sum(axis=axis, keepdims=True)
        return (np.expand_dims(g, axis) * p,)

    return _make(out, (a,), bw, "logsumexp")


def rmsnorm(a, weight, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * weight, normalizing the last axis."""
    a, weight = as_tensor(a), as_tensor(weight)
    x = a.data
    ms = (x * x).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    normed = x * inv
    out = normed * weight.data

    def bw(g):
        d = x.shape[-1]
        gw = _unbroadcast(g * normed, weight.shape)
        gn = g * weight.data
        # d/dx of x * (mean(x^2)+eps)^(-1/2)
        gx = inv * gn - (x * inv ** 3 / d) * (gn * x).sum(axis=-1, keepdims=True)
        return gx, gw

    return _make(out, (a, weight), bw, "rmsnorm")


def embedding(table, ids) -> Tensor:
    """Row lookup; backward scatter-adds into the table."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(out, (table,), bw, "embedding")


def index_rows(a, idx) -> Tensor:
    """Select rows along the first axis; backward scatter-adds them back."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = a.data[idx]

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(out, (a,), bw, "index_rows")


def scatter_rows(a, idx, n_rows: int) -> Tensor:
    """Place rows of `a` at positions `idx` in a zero matrix of n_rows rows.

    Indices must be unique, so backward is a plain gather.
    """
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if len(np.unique(idx)) != len(idx):
        raise ValueError("scatter_rows requires unique row indices")
    out = np.zeros((n_rows,) + a.shape[1:], dtype=np.float64)
    out[idx] = a.data

    def bw(g):
        return (g[idx],)

    return _make(out, (a,), bw, "scatter_rows")


def take_column(a, j: int) -> Tensor:
    """Column j of a 2-D tensor, kept as a [n, 1] tensor."""
    a = as_tensor(a)
    out = a.data[:, j:j + 1]

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[:, j:j + 1] = g
        return (ga,)

    return _make(out, (a,), bw, "take_column")


def concat_rows(tensors) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[0] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=0)

    def bw(g):
        grads, ofs = [], 0
        for n in sizes:
            grads.append(g[ofs:ofs + n])
            ofs += n
        return tuple(grads)

    return _make(out, tuple(tensors), bw, "concat_rows")


def repeat_heads(a, group: int) -> Tensor:
    """Repeat each head `group` times along axis 1 of a [T, H, d] tensor.

    Used to expand grouped key/value heads up to the query head count.
    """
    a = as_tensor(a)
    out = np.repeat(a.data, group, axis=1)

    def bw(g):
        T, HG, d = g.shape
        return (g.reshape(T, HG // group, group, d).sum(axis=2),)

    return _make(out, (a,), bw, "repeat_heads")


def add_const(a, c: np.ndarray) -> Tensor:
    """Add a non-differentiable array (additive attention masks)."""
    a = as_tensor(a)

    def bw(g):
        return (g,)

    return _make(a.data + c, (a,), bw, "add_const")


def mul_const(a, c) -> Tensor:
    a = as_tensor(a)
    c = np.asarray(c, dtype=np.float64)

    def bw(g):
        return (_unbroadcast(g * c, a.shape),)

    return _make(a.data * c, (a,), bw, "mul_const")


# ---- rotary position embedding ----


def _rope_angles(positions: np.ndarray, d: int, base: float) -> tuple:
    half = d // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / d)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(ang), np.sin(ang)


def rope(a, positions, base: float = 10000.0) -> Tensor:
    """Rotate interleaved feature pairs of a [T, H, d] tensor by absolute position.

    Pair j of a vector at position p is rotated by angle p * base^(-2j/d).
    The map is orthogonal per position, so backward applies the inverse
    rotation to the incoming gradient.
    """
    a = as_tensor(a)
    T, H, d = a.shape
    if d % 2 != 0:
        raise ValueError("rope needs an even head dimension")
    cos, sin = _rope_angles(positions, d, base)
    cos = cos[:, None, :]
    sin = sin[:, None, :]
    even = a.data[..., 0::2]
    odd = a.data[..., 1::2]
    out = np.empty_like(a.data)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos

    def bw(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gi = np.empty_like(g)
        gi[..., 0::2] = ge * cos + go * sin
        gi[..., 1::2] = -ge * sin + go * cos
        return (gi,)

    return _make(out, (a,), bw, "rope")


# ---- attention ----


class CacheUnderrunError(RuntimeError):
    """Raised when attention is asked to read more cache than exists."""


def attention(q, k, v, q_positions, k_positions, base: float = 10000.0) -> Tensor:
    """Causal multi-head attention with rotary embeddings and explicit positions.

    q: [T_q, H, d], k and v: [T_k, H_kv, d] with H divisible by H_kv.
    Query at absolute position p may attend keys at absolute positions <= p.
    Raises if any query row has no attendable key.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    Tq, H, d = q.shape
    Tk, Hkv, _ = k.shape
    if H % Hkv != 0:
        raise ValueError("query head count must be a multiple of kv head count")
    q_positions = np.asarray(q_positions, dtype=np.int64)
    k_positions = np.asarray(k_positions, dtype=np.int64)

    allowed = k_positions[None, :] <= q_positions[:, None]
    if not allowed.any(axis=1).all():
        raise CacheUnderrunError("a query position has no attendable key")
    bias = np.where(allowed, 0.0, -np.inf)

    qr = rope(q, q_positions, base)
    kr = rope(k, k_positions, base)
    if Hkv != H:
        kr = repeat_heads(kr, H // Hkv)
        vv = repeat_heads(v, H // Hkv)
    else:
        vv = v

    # [H, T, d] layout for batched matmuls
    qh = transpose_heads(qr)
    kh = transpose_heads(kr)
    vh = transpose_heads(vv)
    scores = mul_const(matmul(qh, transpose(kh)), 1.0 / np.sqrt(d))
    scores = add_const(scores, bias[None, :, :])
    probs = softmax(scores, axis=-1)
    ctx = matmul(probs, vh)  # [H, T_q, d]
    return transpose_heads(ctx)


def transpose_heads(a) -> Tensor:
    """Swap the first two axes of a 3-D tensor ([T, H, d] <-> [H, T, d])."""
    a = as_tensor(a)

    def bw(g):
        return (np.swapaxes(g, 0, 1),)

    return _make(np.swapaxes(a.data, 0, 1), (a,), bw, "transpose_heads")


def causal_attention(q, k, v, position_offset: int = 0, base: float = 10000.0) -> Tensor:
    """Attention where keys sit at positions 0..T_k-1 and queries at offset..offset+T_q-1.

    The decode case is T_q < T_k with the cache providing earlier keys;
    a cache shorter than position_offset + T_q is an underrun.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    Tq = q.shape[0]
    Tk = k.shape[0]
    if Tk < position_offset + Tq:
        raise CacheUnderrunError(
            f"need keys up to position {position_offset + Tq - 1}, cache holds {Tk}")
    q_positions = np.arange(position_offset, position_offset + Tq)
    k_positions = np.arange(Tk)
    return attention(q, k, v, q_positions, k_positions, base)


# ---- losses ----


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under logits rows."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    T = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    nll = lse - shifted[np.arange(T), targets]
    out = nll.mean()

    def bw(g):
        p = np.exp(shifted)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(T), targets] -= 1.0
        return (g * p / T,)

    return _make(out, (logits,), bw, "cross_entropy")


def forward_kl(teacher_logits: np.ndarray, student_logits) -> Tensor:
    """KL(teacher || student) averaged over rows; the teacher is a constant."""
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    ts = teacher_logits - teacher_logits.max(axis=-1, keepdims=True)
    tl = ts - np.log(np.exp(ts).sum(axis=-1, keepdims=True))
    tp = np.exp(tl)
    sl = log_softmax(as_tensor(student_logits), axis=-1)
    per_row = tsum(mul_const(sl, -tp), axis=-1)
    const = float((tp * tl).sum(axis=-1).mean())
    return add(tmean(per_row), const)


def bce(scores, targets) -> Tensor:
    """Binary cross entropy on probabilities, clipped to [1e-7, 1 - 1e-7]."""
    s = clip(as_tensor(scores), 1e-7, 1.0 - 1e-7)
    t = np.asarray(targets, dtype=np.float64)
    losses = add(mul_const(log(s), -t), mul_const(log(add(mul(s, -1.0), 1.0)), -(1.0 - t)))
    return tmean(losses)


# ---- utilities ----


def rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def randn(generator: np.random.Generator, shape, scale: float = 1.0,
          requires_grad: bool = False) -> Tensor:
    return Tensor(generator.normal(0.0, scale, size=shape), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)
