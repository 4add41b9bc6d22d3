"""Minimal reverse-mode autodiff over dense numpy arrays.

Operations executed while a :class:`Tape` is active are recorded in order;
``Tape.backward`` replays them in exact reverse order. Outside a tape (or
under :func:`no_grad`) operations run eagerly and record nothing, which is
how inference runs.

Binary elementwise ops only broadcast a leading batch: the shorter operand's
shape must equal the trailing part of the longer one (bias adds, scalars).
"""

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np

from m3s import kernels as K
from m3s.errors import ConfigError, ContractViolation, NumericError

_local = threading.local()
_dtype = np.float32


def default_dtype():
    return _dtype


def set_default_dtype(dtype):
    global _dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ConfigError(f"unsupported floating dtype {dtype}")
    _dtype = dtype


@contextlib.contextmanager
def precision(bits):
    """Temporarily switch new tensors to 32- or 64-bit floats."""
    prev = _dtype
    set_default_dtype({32: np.float32, 64: np.float64}[bits])
    try:
        yield
    finally:
        set_default_dtype(prev)


def _stack():
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def current_tape():
    st = _stack()
    return st[-1] if st else None


@contextlib.contextmanager
def no_grad():
    st = _stack()
    st.append(None)
    try:
        yield
    finally:
        st.pop()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _dtype, order="C")
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, data, requires_grad):
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor._wrap(self.data, False)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class Tape:
    """Ordered record of executed operations."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        st = _stack()
        assert st and st[-1] is self
        st.pop()
        return False

    def record(self, out, inputs, backward, op):
        self.nodes.append((out, inputs, backward, op))

    def backward(self, loss, seed=None):
        if loss.data.size != 1 and seed is None:
            raise ContractViolation("backward needs a scalar loss or an explicit seed gradient")
        loss.grad = np.ones_like(loss.data) if seed is None else np.asarray(seed, dtype=loss.dtype)
        for out, inputs, backward, _ in reversed(self.nodes):
            g = out.grad
            if g is None:
                continue
            grads = backward(g)
            for inp, gi in zip(inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                inp.grad = gi if inp.grad is None else inp.grad + gi

    def gradients(self, loss, params):
        """Backpropagate ``loss`` and return one gradient array per param.

        Params not reached from the loss get exact zeros.
        """
        params = list(params)
        for p in params:
            p.grad = None
        self.backward(loss)
        out = []
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            out.append(p.grad)
        return out


def _finite(op, data):
    if not np.isfinite(data).all():
        raise NumericError(op)


def _make(op, data, inputs, backward):
    _finite(op, data)
    tape = current_tape()
    if tape is not None:
        for t in inputs:
            if t.requires_grad:
                out = Tensor._wrap(data, True)
                tape.record(out, inputs, backward, op)
                return out
    return Tensor._wrap(data, False)


def _check_bcast(op, a, b):
    if a == b:
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if tuple(long_[len(long_) - len(short):]) != tuple(short):
        raise ConfigError(f"{op}: shapes {a} and {b} do not conform (leading-batch broadcast only)")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    return g.reshape((-1,) + tuple(shape)).sum(axis=0)


def _binary_operands(a, b):
    return as_tensor(a), as_tensor(b)


# ------------------------------------------------------------ elementwise ops

def add(a, b):
    a, b = _binary_operands(a, b)
    _check_bcast("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _binary_operands(a, b)
    _check_bcast("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _binary_operands(a, b)
    _check_bcast("mul", a.shape, b.shape)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = _binary_operands(a, b)
    _check_bcast("div", a.shape, b.shape)
    if not np.all(b.data != 0):
        raise NumericError("div", "division by zero")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("div", out, (a, b), backward)


def exp(x):
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x):
    if not np.all(x.data > 0):
        raise NumericError("log", "non-positive input")
    return _make("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def sigmoid(x):
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype, copy=False)
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x):
    out = np.tanh(x.data)
    return _make("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def gelu(x):
    x2 = x.data.reshape(-1, x.shape[-1]) if x.ndim else x.data.reshape(1, 1)
    out = K.gelu_fwd(x2).reshape(x.shape)

    def backward(g):
        return (K.gelu_bwd(x2, g.reshape(x2.shape)).reshape(x.shape),)

    return _make("gelu", out, (x,), backward)


ACTIVATIONS = {"gelu_tanh": gelu, "tanh": tanh}


def masked_fill(x, mask, value):
    """Replace entries where ``mask`` is true; masked entries get zero gradient."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, x.dtype.type(value), x.data)
    return _make("masked_fill", out, (x,), lambda g: (np.where(mask, 0, g).astype(g.dtype, copy=False),))


# ------------------------------------------------------------ structural ops

def matmul(a, b):
    """Matrix product over the last two axes.

    ``b`` may be 2-D (a weight shared across ``a``'s leading axes); otherwise
    both operands must have the same leading extents.
    """
    a, b = _binary_operands(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ConfigError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    if b.ndim == 2:
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make("matmul", out, (a, b), backward)
    if a.shape[:-2] != b.shape[:-2]:
        raise ConfigError(f"matmul: leading shapes {a.shape[:-2]} and {b.shape[:-2]} differ")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return _make("matmul", out, (a, b), backward)


def reshape(x, shape):
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ConfigError(f"reshape: {exc}") from None
    src = x.shape
    return _make("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ConfigError(f"transpose: invalid axes {axes} for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return _make("transpose", out, (x,), lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                s1 != s2 for k, (s1, s2) in enumerate(zip(t.shape, tensors[0].shape)) if k != ax):
            raise ConfigError(f"concat: shapes {[u.shape for u in tensors]} do not conform on axis {ax}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        idx = [slice(None)] * g.ndim
        grads = []
        for k in range(len(tensors)):
            idx[ax] = slice(bounds[k], bounds[k + 1])
            grads.append(np.ascontiguousarray(g[tuple(idx)]))
        return tuple(grads)

    return _make("concat", out, tuple(tensors), backward)


def slice_axis(x, start, stop, axis=-1):
    ax = axis % x.ndim
    if not 0 <= start < stop <= x.shape[ax]:
        raise ConfigError(f"slice: [{start}:{stop}] out of range for extent {x.shape[ax]}")
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    out = np.ascontiguousarray(x.data[idx])

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _make("slice", out, (x,), backward)


def split(x, sizes, axis=-1):
    if sum(sizes) != x.shape[axis]:
        raise ConfigError(f"split: sizes {sizes} do not sum to extent {x.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        out.append(slice_axis(x, start, start + s, axis))
        start += s
    return out


def embedding(table, ids):
    """Row lookup ``table[ids]``; also serves as a row gather."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ConfigError("embedding: ids must be integers")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ConfigError(f"embedding: id out of range [0, {n})")
    flat = np.ascontiguousarray(ids.reshape(-1), dtype=np.int64)
    out = table.data[flat].reshape(ids.shape + table.shape[1:])

    def backward(g):
        g2 = np.ascontiguousarray(g.reshape(flat.shape[0], -1))
        return (K.scatter_rows(flat, g2, n).reshape(table.shape),)

    return _make("embedding", out, (table,), backward)


def pick(x, idx):
    """``out[...] = x[..., idx[...]]`` along the last axis."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise ConfigError(f"pick: index shape {idx.shape} vs {x.shape[:-1]}")
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return _make("pick", out, (x,), backward)


# ------------------------------------------------------------ reductions

def sum_(x, axis=None, keepdims=False):
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _make("sum", out, (x,), backward)


def mean(x, axis=None, keepdims=False):
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, x.shape) / count).astype(x.dtype),)

    return _make("mean", out, (x,), backward)


def _rows(x, axis):
    """Move ``axis`` last and flatten to 2-D for the row kernels."""
    ax = axis % x.ndim
    moved = np.moveaxis(x.data, ax, -1)
    return ax, moved.shape, np.ascontiguousarray(moved.reshape(-1, moved.shape[-1]))


def _unrows(a2, ax, moved_shape):
    return np.ascontiguousarray(np.moveaxis(a2.reshape(moved_shape), -1, ax))


def softmax(x, axis=-1):
    if not -x.ndim <= axis < x.ndim:
        raise ConfigError(f"softmax: axis {axis} invalid for rank {x.ndim}")
    ax, ms, x2 = _rows(x, axis)
    y2 = K.softmax_fwd(x2)
    out = _unrows(y2, ax, ms)

    def backward(g):
        g2 = np.ascontiguousarray(np.moveaxis(g, ax, -1).reshape(y2.shape))
        return (_unrows(K.softmax_bwd(y2, g2), ax, ms),)

    return _make("softmax", out, (x,), backward)


def log_softmax(x, axis=-1):
    if not -x.ndim <= axis < x.ndim:
        raise ConfigError(f"log_softmax: axis {axis} invalid for rank {x.ndim}")
    ax, ms, x2 = _rows(x, axis)
    y2 = K.log_softmax_fwd(x2)
    out = _unrows(y2, ax, ms)

    def backward(g):
        g2 = np.ascontiguousarray(np.moveaxis(g, ax, -1).reshape(y2.shape))
        return (_unrows(K.log_softmax_bwd(y2, g2), ax, ms),)

    return _make("log_softmax", out, (x,), backward)


def layernorm(x, gamma, beta, eps=1e-5):
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ConfigError(f"layernorm: affine shapes {gamma.shape}/{beta.shape} vs features {d}")
    x2 = x.data.reshape(-1, d)
    y2, xhat, rstd = K.layernorm_fwd(x2, gamma.data, beta.data, x.dtype.type(eps))

    def backward(g):
        gx, gg, gb = K.layernorm_bwd(np.ascontiguousarray(g.reshape(-1, d)), xhat, rstd, gamma.data)
        return gx.reshape(x.shape), gg, gb

    return _make("layernorm", y2.reshape(x.shape), (x, gamma, beta), backward)


def _norms(op, data):
    n = np.sqrt((data * data).sum(axis=-1, keepdims=True))
    if not np.all(n > 0):
        raise NumericError(op, "zero-norm vector")
    return n


def normalize(x):
    """Scale rows (last axis) to unit L2 norm."""
    n = _norms("normalize", x.data)
    out = x.data / n

    def backward(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / n,)

    return _make("normalize", out, (x,), backward)


def cosine_similarity(a, b):
    """Cosine similarity along the last axis; output drops that axis."""
    if a.shape != b.shape:
        raise ConfigError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    na = _norms("cosine_similarity", a.data)
    nb = _norms("cosine_similarity", b.data)
    cos = (a.data * b.data).sum(axis=-1, keepdims=True) / (na * nb)

    def backward(g):
        g = g[..., None]
        ga = g * (b.data / (na * nb) - cos * a.data / (na * na)) if a.requires_grad else None
        gb = g * (a.data / (na * nb) - cos * b.data / (nb * nb)) if b.requires_grad else None
        return ga, gb

    return _make("cosine_similarity", cos[..., 0], (a, b), backward)


# ------------------------------------------------------------ gradient check

@dataclass
class GradcheckReport:
    tolerance: float
    max_rel_error: float = 0.0
    per_param: dict = field(default_factory=dict)
    flagged: list = field(default_factory=list)
    checked: int = 0

    @property
    def passed(self):
        return not self.flagged

    def summary(self):
        worst = max(self.per_param, key=self.per_param.get) if self.per_param else "-"
        return (f"gradcheck: {self.checked} entries, max rel err {self.max_rel_error:.3e} "
                f"(worst {worst}), {len(self.flagged)} above {self.tolerance:g}")


def gradcheck(fn, params, epsilon=1e-6, tolerance=1e-6, floor=1e-3, max_entries=None, seed=0):
    """Compare tape gradients of scalar ``fn()`` with central differences.

    ``params`` maps names to leaf tensors (a list is also accepted). Relative
    error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero
    gradients from being judged on round-off alone. ``max_entries`` limits the
    number of elements probed per tensor (chosen with ``seed``).
    """
    if _dtype is not np.float64:
        raise ContractViolation("gradcheck requires 64-bit mode (use precision(64))")
    if not 1e-6 <= epsilon <= 1e-3:
        raise ConfigError(f"epsilon {epsilon} outside [1e-6, 1e-3]")
    if not isinstance(params, dict):
        params = {getattr(p, "name", None) or f"p{k}": p for k, p in enumerate(params)}
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ContractViolation(f"parameter {name} is not float64")

    def value():
        with no_grad():
            return float(fn().data)

    f0 = value()
    if value() != f0:
        raise ContractViolation("scalar_fn is not deterministic")

    with Tape() as tape:
        loss = fn()
    analytic = tape.gradients(loss, params.values())

    rng = np.random.default_rng(seed)
    report = GradcheckReport(tolerance=tolerance)
    for (name, p), ga in zip(params.items(), analytic):
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idxs = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        for k in idxs:
            orig = flat[k]
            flat[k] = orig + epsilon
            fp = value()
            flat[k] = orig - epsilon
            fm = value()
            flat[k] = orig
            num = (fp - fm) / (2 * epsilon)
            ana = float(ga.reshape(-1)[k])
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, rel)
            report.checked += 1
            if rel > tolerance:
                report.flagged.append((name, int(k), ana, num, rel))
        report.per_param[name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
    return report
