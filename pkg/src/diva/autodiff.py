"""Minimal reverse-mode autodiff over dense float64 tensors.

Everything is recorded on an explicit Tape so a forward pass can be
replayed bit-identically and walked backwards exactly once. Shapes are
static per tape; numerics are 64-bit throughout.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Parameter",
    "OpError",
    "NumericDomainError",
    "backward",
    "grad_check",
    "GradCheckReport",
    "forward_op",
    "normalize_warning_count",
]

_LNORM_EPS = 1e-8
_LAYERNORM_EPS = 1e-5

# rows skipped by the l2_normalize guard since process start
normalize_warning_count = 0


class OpError(ValueError):
    """Shape/contract violation in an op."""


class NumericDomainError(ArithmeticError):
    """Numeric-domain violation (e.g. log of a non-positive value)."""


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    Tensors produced by ops are immutable once recorded; leaves may be
    re-assigned via set_values() between tape replays.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape", "_record")

    def __init__(self, data, requires_grad=False, tape=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.tape = tape
        self._record = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.data.shape:
            raise OpError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def set_values(self, data):
        data = np.asarray(data, dtype=np.float64)
        if data.shape != self.data.shape:
            raise OpError(f"cannot change shape {self.data.shape} -> {data.shape}")
        self.data = data

    def item(self):
        if self.data.size != 1:
            raise OpError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter:
    """Named trainable (or frozen) tensor.

    Frozen parameters keep requires_grad=False so no gradient is ever
    accumulated for them, while gradients still flow *through* the ops
    they participate in.
    """

    __slots__ = ("name", "tensor", "trainable")

    def __init__(self, name, data, trainable=True):
        self.name = name
        self.tensor = Tensor(np.asarray(data, dtype=np.float64), requires_grad=trainable)
        self.trainable = trainable

    @property
    def data(self):
        return self.tensor.data

    def freeze(self):
        self.trainable = False
        self.tensor.requires_grad = False

    def unfreeze(self):
        self.trainable = True
        self.tensor.requires_grad = True

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape}, trainable={self.trainable})"


class _Record:
    __slots__ = ("out", "inputs", "forward_fn", "backward_fn", "kind")

    def __init__(self, out, inputs, forward_fn, backward_fn, kind):
        self.out = out
        self.inputs = inputs
        self.forward_fn = forward_fn
        self.backward_fn = backward_fn
        self.kind = kind


class Tape:
    """Ordered record of executed ops; inputs always precede their consumers."""

    def __init__(self):
        self.records = []

    def add(self, record):
        self.records.append(record)

    def replay(self):
        """Re-run every recorded forward in order, refreshing outputs in place."""
        for rec in self.records:
            rec.out.data = rec.forward_fn()

    def clear_intermediate_grads(self):
        for rec in self.records:
            rec.out.grad = None

    def __len__(self):
        return len(self.records)


def _as_tensor(x, tape):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64), tape=tape)


def _pick_tape(inputs):
    for t in inputs:
        if isinstance(t, Tensor) and t.tape is not None:
            return t.tape
    return None


def _record_op(kind, inputs, out_data, forward_fn, backward_fn, tape=None):
    tape = tape or _pick_tape(inputs)
    out = Tensor(out_data, tape=tape)
    out.requires_grad = any(t.requires_grad or t._record is not None for t in inputs)
    rec = _Record(out, tuple(inputs), forward_fn, backward_fn, kind)
    out._record = rec
    if tape is not None:
        tape.add(rec)
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to `shape`."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_finite(kind, data):
    if not np.all(np.isfinite(data)):
        raise NumericDomainError(f"op '{kind}' produced non-finite values")


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Batched matrix product (..., n, k) @ (..., k, m)."""
    a = _as_tensor(a, None)
    b = _as_tensor(b, None)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise OpError(f"matmul shapes {a.data.shape} @ {b.data.shape} do not conform")

    def fwd():
        return a.data @ b.data

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    return _record_op("matmul", (a, b), fwd(), fwd, bwd)


def add(a, b):
    a = _as_tensor(a, None)
    b = _as_tensor(b, None)
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError as e:
        raise OpError(f"add shapes {a.data.shape} + {b.data.shape}: {e}") from None

    def fwd():
        return a.data + b.data

    def bwd(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return _record_op("add", (a, b), fwd(), fwd, bwd)


def sub(a, b):
    return add(a, scale(b, -1.0))


def mul(a, b):
    a = _as_tensor(a, None)
    b = _as_tensor(b, None)
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError as e:
        raise OpError(f"mul shapes {a.data.shape} * {b.data.shape}: {e}") from None

    def fwd():
        return a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape))

    return _record_op("mul", (a, b), fwd(), fwd, bwd)


def scale(a, c):
    a = _as_tensor(a, None)
    c = float(c)

    def fwd():
        return a.data * c

    def bwd(g):
        return (g * c,)

    return _record_op("scale", (a,), fwd(), fwd, bwd)


def exp(a):
    a = _as_tensor(a, None)

    def fwd():
        with np.errstate(over="ignore"):
            out = np.exp(a.data)
        _check_finite("exp", out)
        return out

    out_data = fwd()

    def bwd(g, _out=out_data):
        return (g * np.exp(a.data),)

    return _record_op("exp", (a,), out_data, fwd, bwd)


def log(a):
    a = _as_tensor(a, None)
    if np.any(a.data <= 0):
        raise NumericDomainError("op 'log' applied to a non-positive value")

    def fwd():
        return np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return _record_op("log", (a,), fwd(), fwd, bwd)


def log_floor(a, floor=1e-12):
    """log(max(a, floor)); zero gradient in the clamped region."""
    a = _as_tensor(a, None)
    floor = float(floor)

    def fwd():
        return np.log(np.maximum(a.data, floor))

    def bwd(g):
        mask = a.data >= floor
        return (np.where(mask, g / np.maximum(a.data, floor), 0.0),)

    return _record_op("log_floor", (a,), fwd(), fwd, bwd)


def relu(a):
    a = _as_tensor(a, None)

    def fwd():
        return np.maximum(a.data, 0.0)

    def bwd(g):
        return (g * (a.data > 0.0),)

    return _record_op("relu", (a,), fwd(), fwd, bwd)


def softmax_rows(a):
    """Numerically stable softmax along the last axis."""
    a = _as_tensor(a, None)
    if not np.all(np.isfinite(a.data)):
        raise NumericDomainError("op 'softmax_rows' received non-finite input")

    def fwd():
        z = a.data - a.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    out_data = fwd()

    def bwd(g):
        s = out_data
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _record_op("softmax_rows", (a,), out_data, fwd, bwd)


def layernorm(a, gain, bias):
    """Layer normalization over the last axis with affine gain/bias."""
    a = _as_tensor(a, None)
    gain = _as_tensor(gain, None)
    bias = _as_tensor(bias, None)
    h = a.data.shape[-1]
    if gain.data.shape != (h,) or bias.data.shape != (h,):
        raise OpError(f"layernorm affine shapes must be ({h},)")

    def stats():
        mu = a.data.mean(axis=-1, keepdims=True)
        var = a.data.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + _LAYERNORM_EPS)
        xhat = (a.data - mu) * inv
        return mu, inv, xhat

    def fwd():
        _, _, xhat = stats()
        return xhat * gain.data + bias.data

    def bwd(g):
        _, inv, xhat = stats()
        gg = _unbroadcast(g * xhat, gain.data.shape)
        gb = _unbroadcast(g, bias.data.shape)
        gx_hat = g * gain.data
        m1 = gx_hat.mean(axis=-1, keepdims=True)
        m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
        ga = inv * (gx_hat - m1 - xhat * m2)
        return (ga, gg, gb)

    return _record_op("layernorm", (a, gain, bias), fwd(), fwd, bwd)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t, None) for t in tensors]
    if not tensors:
        raise OpError("concat of zero tensors")
    axis = int(axis)

    def fwd():
        return np.concatenate([t.data for t in tensors], axis=axis)

    sizes = [t.data.shape[axis] for t in tensors]

    def bwd(g):
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, splits, axis=axis))

    return _record_op("concat", tuple(tensors), fwd(), fwd, bwd)


def slice_(a, key):
    """Basic slicing; backward scatters the gradient into a zero buffer."""
    a = _as_tensor(a, None)

    def fwd():
        return a.data[key].copy()

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[key] = g
        return (ga,)

    return _record_op("slice", (a,), fwd(), fwd, bwd)


def reshape(a, shape):
    a = _as_tensor(a, None)
    shape = tuple(int(s) for s in shape)

    def fwd():
        return a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.data.shape),)

    return _record_op("reshape", (a,), fwd(), fwd, bwd)


def transpose(a, axes):
    a = _as_tensor(a, None)
    axes = tuple(int(x) for x in axes)
    inv = tuple(np.argsort(axes))

    def fwd():
        return np.transpose(a.data, axes).copy()

    def bwd(g):
        return (np.transpose(g, inv),)

    return _record_op("transpose", (a,), fwd(), fwd, bwd)


def sum_(a, axis=None):
    a = _as_tensor(a, None)

    def fwd():
        return np.asarray(a.data.sum(axis=axis))

    def bwd(g):
        if axis is None:
            return (np.full_like(a.data, float(np.asarray(g).reshape(-1)[0])),)
        g = np.expand_dims(g, axis=axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _record_op("sum", (a,), fwd(), fwd, bwd)


def mean(a, axis=None):
    a = _as_tensor(a, None)
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]

    def fwd():
        return np.asarray(a.data.mean(axis=axis))

    def bwd(g):
        if axis is None:
            return (np.full_like(a.data, float(np.asarray(g).reshape(-1)[0]) / n),)
        g = np.expand_dims(g, axis=axis) / n
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _record_op("mean", (a,), fwd(), fwd, bwd)


def l2_normalize_rows(a):
    """Normalize rows (last axis) to unit norm; rows with norm < 1e-8 pass
    through unscaled (counted in normalize_warning_count)."""
    a = _as_tensor(a, None)

    def norms():
        return np.linalg.norm(a.data, axis=-1, keepdims=True)

    def fwd():
        global normalize_warning_count
        n = norms()
        degenerate = n < _LNORM_EPS
        normalize_warning_count += int(degenerate.sum())
        safe = np.where(degenerate, 1.0, n)
        return a.data / safe

    out_data = fwd()

    def bwd(g):
        n = norms()
        degenerate = n < _LNORM_EPS
        safe = np.where(degenerate, 1.0, n)
        y = a.data / safe
        ga = (g - y * (g * y).sum(axis=-1, keepdims=True)) / safe
        ga = np.where(degenerate, g, ga)
        return (ga,)

    return _record_op("l2_normalize_rows", (a,), out_data, fwd, bwd)


def l2_norm_rows(a):
    """Euclidean norm of each row; subgradient 0 at exactly-zero rows so the
    value is 0 exactly (no epsilon smoothing)."""
    a = _as_tensor(a, None)

    def fwd():
        return np.linalg.norm(a.data, axis=-1)

    def bwd(g):
        n = np.linalg.norm(a.data, axis=-1, keepdims=True)
        safe = np.where(n < 1e-300, 1.0, n)
        return (np.expand_dims(g, -1) * np.where(n < 1e-300, 0.0, a.data / safe),)

    return _record_op("l2_norm_rows", (a,), fwd(), fwd, bwd)


def cosine_sim_matrix(a, b):
    """Cosine similarities between all rows of a (n×h) and b (m×h) -> n×m."""
    a = _as_tensor(a, None)
    b = _as_tensor(b, None)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise OpError(f"cosine_sim_matrix shapes {a.data.shape}, {b.data.shape}")
    an = l2_normalize_rows(a)
    bn = l2_normalize_rows(b)
    return matmul(an, transpose(bn, (1, 0)))


def embedding(table, ids):
    """Row lookup into an embedding table; backward scatter-adds."""
    table = _as_tensor(table, None)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise OpError(f"embedding id out of range for table of {table.data.shape[0]} rows")

    def fwd():
        return table.data[ids].copy()

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (gt,)

    return _record_op("embedding", (table,), fwd(), fwd, bwd)


def cross_entropy_rows(logits, onehot):
    """Per-row cross entropy −Σ y·log_softmax(z), stabilized by max subtraction."""
    logits = _as_tensor(logits, None)
    onehot = _as_tensor(onehot, None)
    if logits.data.shape != onehot.data.shape:
        raise OpError(
            f"cross_entropy_rows shapes {logits.data.shape} vs {onehot.data.shape}"
        )

    def logsm():
        z = logits.data - logits.data.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def fwd():
        return -(onehot.data * logsm()).sum(axis=-1)

    def bwd(g):
        p = np.exp(logsm())
        row_w = onehot.data.sum(axis=-1, keepdims=True)
        gl = np.expand_dims(g, -1) * (p * row_w - onehot.data)
        gy = -np.expand_dims(g, -1) * logsm()
        return (gl, _unbroadcast(gy, onehot.data.shape))

    return _record_op("cross_entropy_rows", (logits, onehot), fwd(), fwd, bwd)


_OP_TABLE = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "scale": scale,
    "exp": exp,
    "log": log,
    "relu": relu,
    "softmax_rows": softmax_rows,
    "layernorm": layernorm,
    "concat": concat,
    "slice": slice_,
    "sum": sum_,
    "mean": mean,
    "l2_normalize_rows": l2_normalize_rows,
    "cosine_sim_matrix": cosine_sim_matrix,
    "cross_entropy_rows": cross_entropy_rows,
}


def forward_op(kind, *inputs, **kwargs):
    """Dispatch an op by name; unknown kinds are configuration errors."""
    if kind not in _OP_TABLE:
        raise OpError(f"unknown op kind {kind!r}; valid: {sorted(_OP_TABLE)}")
    return _OP_TABLE[kind](*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def backward(root):
    """Reverse-accumulate gradients of a scalar root through its history.

    Repeated calls accumulate into existing .grad buffers; zeroing is the
    optimizer's job.
    """
    if not isinstance(root, Tensor) or root.data.size != 1:
        raise OpError("backward root must be a scalar tensor")
    grads = {id(root): np.ones_like(root.data)}
    order = _reverse_toposort(root)
    for rec in order:
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        if rec.out.requires_grad:
            rec.out.accumulate_grad(g)
        input_grads = rec.backward_fn(g)
        for t, gi in zip(rec.inputs, input_grads):
            if gi is None:
                continue
            if t._record is not None:
                if id(t) in grads:
                    grads[id(t)] = grads[id(t)] + gi
                else:
                    grads[id(t)] = np.asarray(gi, dtype=np.float64)
            elif t.requires_grad:
                t.accumulate_grad(gi)


def _reverse_toposort(root):
    order = []
    state = {}
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            if t._record is not None:
                order.append(t._record)
            continue
        if state.get(id(t)):
            continue
        state[id(t)] = True
        stack.append((t, True))
        if t._record is not None:
            for parent in t._record.inputs:
                stack.append((parent, False))
    return list(reversed(order))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


class GradCheckReport:
    """Elementwise comparison of analytic vs central-difference gradients."""

    def __init__(self, analytic, numeric):
        self.analytic = analytic
        self.numeric = numeric
        denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
        self.rel_err = np.abs(analytic - numeric) / denom
        self.max_rel_err = float(self.rel_err.max()) if self.rel_err.size else 0.0

    def passes(self, tol):
        return self.max_rel_err < tol


def grad_check(f, x, step=1e-4, tol=1e-3):
    """Compare backprop gradients of scalar f(x) with central differences.

    `f` must build a fresh graph from `x` on every call; `x` is restored
    to its initial values afterwards.
    """
    x.requires_grad = True
    x.zero_grad()
    out = f(x)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise OpError("grad_check target must return a scalar tensor")
    backward(out)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    base = x.data.copy()
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        for sign in (+1.0, -1.0):
            probe = flat.copy()
            probe[i] += sign * step
            x.set_values(probe.reshape(base.shape))
            val = f(x).item()
            if not np.isfinite(val):
                x.set_values(base)
                raise NumericDomainError(
                    f"grad_check probe at flat index {i} ({sign:+.0f}{step:g}) returned non-finite value"
                )
            num_flat[i] += sign * val
        num_flat[i] /= 2.0 * step
    x.set_values(base)
    x.zero_grad()
    return GradCheckReport(analytic, numeric)
