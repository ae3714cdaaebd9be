"""Minimal numpy substrate for the token models: dense tensors with a
reverse-mode tape, transformer layers, softmax cross-entropy and Adam.

Everything is single-threaded and deterministic given the numpy Generator
used to build the parameters. Training runs in float32 by default; pass
``dtype=np.float64`` when building a model that will be gradient-checked.
"""

from __future__ import annotations

import struct
import threading

import numpy as np

SQRT_2_OVER_PI = float(np.sqrt(2.0 / np.pi))
GELU_CUBIC = 0.044715
ATTENTION_NEG = -1e9  # additive logit for blocked attention positions

_ACTIVE = threading.local()  # one recording graph per thread


class GraphError(RuntimeError):
    """Backward called without (or outside of) a recorded forward pass."""


class NumericError(ArithmeticError):
    """Non-finite value met where the contract requires finite numbers."""


class Graph:
    """Tape of one forward pass, recorded in creation order.

    Creation order is a topological order of the DAG, so backward simply
    walks the node list in reverse. Use as a context manager::

        with Graph() as g:
            loss = model.loss(...)
        g.backward(loss)
    """

    def __init__(self):
        self._nodes = []
        self._tensor_ids = set()

    def __enter__(self):
        if getattr(_ACTIVE, "graph", None) is not None:
            raise GraphError("graphs do not nest")
        _ACTIVE.graph = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE.graph = None
        return False

    def _record(self, out, backward_fn):
        self._nodes.append((out, backward_fn))
        self._tensor_ids.add(id(out))

    def backward(self, loss):
        """Populate ``.grad`` on every tensor reachable from ``loss``."""
        if not self._nodes or id(loss) not in self._tensor_ids:
            raise GraphError("backward before forward: loss was not recorded on this graph")
        if loss.data.size != 1:
            raise ValueError("backward expects a scalar loss")
        loss.grad = np.ones_like(loss.data)
        for out, backward_fn in reversed(self._nodes):
            if out.grad is not None:
                backward_fn(out.grad)


class Tensor:
    """A dense array plus an optional gradient buffer of identical shape."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.data.shape}, dtype={self.data.dtype})"

    # Operator sugar; the heavy lifting lives in the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out, inputs, backward_fn):
    g = getattr(_ACTIVE, "graph", None)
    if g is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        g._record(out, backward_fn)
    return out


def _unbroadcast(g, shape):
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _record(out, (a, b), backward)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.data.shape))

    return _record(out, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), backward)


def scale(a, c):
    a = _as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * c)

    return _record(out, (a,), backward)


def add_const(a, c):
    """Add a constant array (no gradient flows into ``c``)."""
    a = _as_tensor(a)
    out = Tensor(a.data + c)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))

    return _record(out, (a,), backward)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim > 2 or b.data.ndim > 2:
        if a.data.shape[:-2] != b.data.shape[:-2]:
            raise ValueError(f"matmul stack dims differ: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b.accumulate_grad(np.swapaxes(a.data, -1, -2) @ g)

    return _record(out, (a, b), backward)


def exp(a):
    a = _as_tensor(a)
    out = Tensor(np.exp(a.data))

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * out.data)

    return _record(out, (a,), backward)


def clip(a, lo, hi):
    """Clamp values; gradient is zero outside [lo, hi]."""
    a = _as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi))
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * inside)

    return _record(out, (a,), backward)


def gelu(a):
    """tanh-approximation GELU (smooth, so finite differences behave)."""
    a = _as_tensor(a)
    x = a.data
    x2 = x * x
    inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x2 * x)
    t = np.tanh(inner)
    out = Tensor(0.5 * x * (1.0 + t))

    def backward(g):
        if a.requires_grad:
            d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x2)
            deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
            a.accumulate_grad(g * deriv)

    return _record(out, (a,), backward)


def reshape(a, shape):
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.data.shape))

    return _record(out, (a,), backward)


def transpose(a, axes):
    a = _as_tensor(a)
    out = Tensor(np.transpose(a.data, axes))
    inverse = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.transpose(g, inverse))

    return _record(out, (a,), backward)


def softmax(a, axis=-1):
    """Numerically stabilized softmax; rows sum to 1 along ``axis``."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def backward(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            a.accumulate_grad(y * (g - dot))

    return _record(out, (a,), backward)


def gather_rows(table, ids):
    """Embedding lookup: rows of ``table`` selected by integer ``ids``."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValueError(
            f"index out of range: ids in [{ids.min()}, {ids.max()}] for table of {table.data.shape[0]} rows"
        )
    out = Tensor(table.data[ids])

    def backward(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, g)

    return _record(out, (table,), backward)


take_rows = gather_rows  # row sub-selection and embedding lookup share a kernel


def concat_rows(tensors):
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=0))
    sizes = [t.data.shape[0] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t.accumulate_grad(g[lo:hi])

    return _record(out, tuple(tensors), backward)


def sum_all(a):
    a = _as_tensor(a)
    out = Tensor(np.asarray(a.data.sum()))

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.broadcast_to(g, a.data.shape).copy())

    return _record(out, (a,), backward)


def mean_all(a):
    a = _as_tensor(a)
    out = Tensor(np.asarray(a.data.mean()))
    inv_n = 1.0 / a.data.size

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.broadcast_to(g * inv_n, a.data.shape).copy())

    return _record(out, (a,), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivar
    out = Tensor(xhat * gamma.data + beta.data)

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta.accumulate_grad(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            dot1 = gx.sum(axis=-1, keepdims=True)
            dot2 = (gx * xhat).sum(axis=-1, keepdims=True)
            x.accumulate_grad(ivar * (gx - dot1 / d - xhat * dot2 / d))

    return _record(out, (x, gamma, beta), backward)


def cross_entropy(logits, targets, label_smoothing=0.0):
    """Mean softmax cross-entropy, stabilized by max subtraction.

    ``logits`` is (n, V); ``targets`` is n integer class indices in [0, V).
    With label smoothing eps, the target distribution becomes
    (1 - eps) * one_hot + eps / V.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    n, v = logits.data.shape
    if targets.shape != (n,):
        raise ValueError(f"targets shape {targets.shape} does not match {n} logit rows")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ValueError(f"target out of range: got {targets.max()} with vocabulary {v}")
    eps = float(label_smoothing)

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + logits.data.max(axis=1)
    picked = logits.data[np.arange(n), targets]
    nll = lse - (1.0 - eps) * picked - (eps / v) * logits.data.sum(axis=1)
    out = Tensor(np.asarray(nll.mean(), dtype=logits.data.dtype))

    def backward(g):
        if logits.requires_grad:
            p = np.exp(shifted)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(n), targets] -= 1.0 - eps
            p -= eps / v
            logits.accumulate_grad(p * (g / n))

    return _record(out, (logits,), backward)


# ---------------------------------------------------------------------------
# parameter containers and layers
# ---------------------------------------------------------------------------

def linear_init(rng, fan_in, fan_out, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def embedding_init(rng, rows, dim, dtype):
    return rng.normal(0.0, 0.02, size=(rows, dim)).astype(dtype)


class Linear:
    """Affine layer; ``init_scale`` < 1 shrinks the weight init (used for
    output heads so untrained logits start near-uniform)."""

    def __init__(self, d_in, d_out, rng, dtype=np.float32, name="linear", init_scale=1.0):
        self.name = name
        w = linear_init(rng, d_in, d_out, dtype) * dtype(init_scale)
        self.w = Tensor(w, requires_grad=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True, name=f"{name}.b")

    def __call__(self, x):
        return add(matmul(x, self.w), self.b)

    def parameters(self):
        return [self.w, self.b]


class LayerNorm:
    def __init__(self, dim, dtype=np.float32, name="ln"):
        self.name = name
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True, name=f"{name}.beta")

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta)

    def parameters(self):
        return [self.gamma, self.beta]


class Embedding:
    def __init__(self, rows, dim, rng, dtype=np.float32, name="embed"):
        self.name = name
        self.table = Tensor(embedding_init(rng, rows, dim, dtype), requires_grad=True, name=f"{name}.table")

    def __call__(self, ids):
        return gather_rows(self.table, ids)

    def parameters(self):
        return [self.table]


class MultiHeadAttention:
    """Scaled dot-product attention with per-head split and output projection.

    ``mask`` is an optional boolean (Tq, Tk) matrix; False entries receive
    zero attention weight (a large negative additive logit). Works for both
    self-attention (q is k is v) and cross-attention.
    """

    def __init__(self, dim, heads, rng, dtype=np.float32, name="attn"):
        if dim % heads != 0:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.name = name
        self.wq = Linear(dim, dim, rng, dtype, f"{name}.wq")
        self.wk = Linear(dim, dim, rng, dtype, f"{name}.wk")
        self.wv = Linear(dim, dim, rng, dtype, f"{name}.wv")
        self.wo = Linear(dim, dim, rng, dtype, f"{name}.wo")

    def _split(self, x, t):
        return transpose(reshape(x, (t, self.heads, self.head_dim)), (1, 0, 2))

    def __call__(self, q_in, k_in, v_in, mask=None):
        q_in, k_in, v_in = _as_tensor(q_in), _as_tensor(k_in), _as_tensor(v_in)
        tq, tk = q_in.data.shape[0], k_in.data.shape[0]
        if q_in.data.shape[-1] != self.dim or k_in.data.shape[-1] != self.dim:
            raise ValueError(f"attention expects dim {self.dim}, got {q_in.data.shape} / {k_in.data.shape}")
        q = self._split(self.wq(q_in), tq)
        k = self._split(self.wk(k_in), tk)
        v = self._split(self.wv(v_in), tk)
        scores = scale(matmul(q, transpose(k, (0, 2, 1))), 1.0 / np.sqrt(self.head_dim))
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (tq, tk):
                raise ValueError(f"mask shape {mask.shape} does not match ({tq}, {tk})")
            additive = np.where(mask, 0.0, ATTENTION_NEG).astype(scores.data.dtype)
            scores = add_const(scores, additive[None, :, :])
        weights = softmax(scores, axis=-1)
        mixed = matmul(weights, v)
        merged = reshape(transpose(mixed, (1, 0, 2)), (tq, self.dim))
        return self.wo(merged)

    def parameters(self):
        return self.wq.parameters() + self.wk.parameters() + self.wv.parameters() + self.wo.parameters()


def forward_attention(layer, q, k, v, mask=None):
    """Run one multi-head attention layer; see MultiHeadAttention."""
    return layer(q, k, v, mask=mask)


class TransformerBlock:
    """Pre-layer-norm block: x + attn(ln(x)); x + mlp(ln(x))."""

    def __init__(self, dim, heads, rng, dtype=np.float32, hidden_mult=4, name="block"):
        self.name = name
        self.ln1 = LayerNorm(dim, dtype, f"{name}.ln1")
        self.attn = MultiHeadAttention(dim, heads, rng, dtype, f"{name}.attn")
        self.ln2 = LayerNorm(dim, dtype, f"{name}.ln2")
        self.fc1 = Linear(dim, hidden_mult * dim, rng, dtype, f"{name}.fc1")
        self.fc2 = Linear(hidden_mult * dim, dim, rng, dtype, f"{name}.fc2")

    def __call__(self, x, mask=None):
        h = self.ln1(x)
        x = add(x, self.attn(h, h, h, mask=mask))
        x = add(x, self.fc2(gelu(self.fc1(self.ln2(x)))))
        return x

    def parameters(self):
        return (
            self.ln1.parameters()
            + self.attn.parameters()
            + self.ln2.parameters()
            + self.fc1.parameters()
            + self.fc2.parameters()
        )


def sinusoidal_positions(length, dim, dtype=np.float32):
    """Fixed sin/cos position table of shape (length, dim)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / dim)
    table = np.zeros((length, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table.astype(dtype)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Bias-corrected Adam over an ordered parameter list."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        t = self.step_count
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {p.name or f'param {i}'} at step {t}")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / (1.0 - self.beta1**t)
            v_hat = self.v[i] / (1.0 - self.beta2**t)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# checkpoint format: magic ANC1, then per parameter
#   u32 name_len, name utf-8, u32 rank, u32 dims..., f32 values little-endian
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"ANC1"


def save_checkpoint(path, named_arrays):
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, arr in named_arrays:
            arr = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    out = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        while True:
            head = fh.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            count = int(np.prod(dims)) if rank else 1
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise ValueError(f"truncated checkpoint while reading {name}")
            out[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    return out


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def gradient_check(build_loss, named_params, h=1e-5):
    """Central finite differences against the tape, per parameter tensor.

    ``build_loss`` must rerun the forward pass from scratch and return the
    scalar loss Tensor. Parameters must be float64. Returns a dict
    name -> relative error, where the relative error is
    ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-12).
    """
    for name, p in named_params:
        if p.data.dtype != np.float64:
            raise ValueError(f"gradient_check requires float64 parameters, {name} is {p.data.dtype}")
        p.zero_grad()
    with Graph() as g:
        loss = build_loss()
    g.backward(loss)
    analytic = {name: p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for name, p in named_params}

    errors = {}
    for name, p in named_params:
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            f_plus = float(build_loss().data)
            flat[j] = orig - h
            f_minus = float(build_loss().data)
            flat[j] = orig
            num_flat[j] = (f_plus - f_minus) / (2.0 * h)
        a = analytic[name]
        denom = max(np.linalg.norm(a), np.linalg.norm(numeric), 1e-12)
        errors[name] = float(np.linalg.norm(a - numeric) / denom)
    return errors
