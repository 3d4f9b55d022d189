"""Small dense reverse-mode autodiff engine on top of numpy float64 arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a closure
propagating the output gradient back to them.  :func:`backward` replays the
recorded graph in reverse topological order.
"""
import json
import math
from collections import OrderedDict
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import sparse


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "op")

    def __init__(self, data, parents=(), backward_fn=None, op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = any(p.requires_grad for p in self.parents)
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, op={self.op!r})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__


def constant(data):
    return Tensor(data)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Parameter(Tensor):
    """A named leaf tensor updated by the optimizer."""

    __slots__ = ("name", "adam_m", "adam_v", "step_count")

    def __init__(self, name, value):
        super().__init__(value, op="param")
        self.name = name
        self.requires_grad = True
        self.grad = np.zeros_like(self.data)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={list(self.shape)})"


def _make(data, parents, backward_fn, op):
    out = Tensor(data, parents, op=op)
    if out.requires_grad:
        out.backward_fn = backward_fn
    else:
        out.parents = ()
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# ops


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {list(a.shape)} and {list(b.shape)}")

    def back(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), back, "matmul")


def add(a, b):
    """Elementwise sum; ``b`` may also be a 1 x n row broadcast over rows of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    row_bias = b.data.ndim == 2 and a.data.ndim == 2 and b.shape[0] == 1 and a.shape[1] == b.shape[1]
    if a.shape != b.shape and not row_bias:
        raise ShapeError(f"add: incompatible shapes {list(a.shape)} and {list(b.shape)}")

    def back(g):
        _accum(a, g)
        _accum(b, g.sum(axis=0, keepdims=True) if a.shape != b.shape else g)

    return _make(a.data + b.data, (a, b), back, "add")


def add_n(terms):
    terms = list(terms)
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {list(a.shape)} and {list(b.shape)}")

    def back(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), back, "mul")


def scale(x, c):
    x = as_tensor(x)
    c = float(c)
    return _make(x.data * c, (x,), lambda g: _accum(x, g * c), "scale")


def row_scale(x, w):
    """Multiply row ``i`` of ``x`` (n x d) by ``w[i]`` (w is n x 1)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.shape != (x.shape[0], 1):
        raise ShapeError(f"row_scale: weights {list(w.shape)} do not match rows of {list(x.shape)}")

    def back(g):
        _accum(x, g * w.data)
        _accum(w, (g * x.data).sum(axis=1, keepdims=True))

    return _make(x.data * w.data, (x, w), back, "row_scale")


def total(x):
    x = as_tensor(x)
    return _make(np.array(x.data.sum()), (x,), lambda g: _accum(x, np.full(x.shape, float(g))), "sum")


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: _accum(x, g * (1.0 - y * y)), "tanh")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: _accum(x, g * mask), "relu")


def leaky_relu(x, slope):
    x = as_tensor(x)
    mask = x.data > 0
    factor = np.where(mask, 1.0, slope)
    return _make(x.data * factor, (x,), lambda g: _accum(x, g * factor), "leaky_relu")


class Activation(Enum):
    TANH = "tanh"
    RELU = "relu"
    LEAKY_RELU = "leaky_relu"

    @classmethod
    def parse(cls, name):
        return cls(name.lower().replace("-", "_"))


def activate(x, act=Activation.TANH, slope=0.01):
    if act is Activation.TANH:
        return tanh(x)
    if act is Activation.RELU:
        return relu(x)
    if act is Activation.LEAKY_RELU:
        if not 0.0 < slope < 1.0:
            raise ValueError(f"LeakyReLU slope must lie in (0, 1), got {slope}")
        return leaky_relu(x, slope)
    raise ValueError(f"unknown activation {act!r}")


def concat(parts, axis=1):
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat: empty part list")
    if len(parts) == 1:
        return parts[0]
    other = 1 - axis
    if any(p.data.ndim != 2 or p.shape[other] != parts[0].shape[other] for p in parts):
        raise ShapeError(f"concat: incompatible shapes {[list(p.shape) for p in parts]}")
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts])

    def back(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, g[:, lo:hi] if axis == 1 else g[lo:hi])

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, back, "concat")


def scatter_rows(values, idx, n):
    """``out[idx[i]] += values[i]`` into ``n`` rows; a sparse product, much faster than ``np.add.at``."""
    values = np.asarray(values, dtype=np.float64)
    idx = np.asarray(idx, dtype=np.int64)
    if values.ndim == 1:
        return np.bincount(idx, weights=values, minlength=n)
    flat = values.reshape(len(idx), -1)
    m = sparse.csr_matrix((np.ones(len(idx)), (idx, np.arange(len(idx)))), shape=(n, len(idx)))
    return np.asarray(m @ flat).reshape((n,) + values.shape[1:])


def index_rows(x, idx):
    """Gather rows ``x[idx]``; the backward pass scatters with accumulation."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        if not x.requires_grad:
            return
        _accum(x, scatter_rows(g, idx, x.shape[0]))

    return _make(x.data[idx], (x,), back, "index_rows")


def segment_sum(x, segment_ids, num_segments):
    """Sum rows of ``x`` into ``num_segments`` buckets; empty buckets stay zero."""
    x = as_tensor(x)
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    out = scatter_rows(x.data, segment_ids, num_segments)
    return _make(out, (x,), lambda g: _accum(x, g[segment_ids]), "segment_sum")


def weighted_scatter(x, src, dst, w, num_segments):
    """``out[dst[i]] += w[i] * x[src[i]]``: a sparse product equal to
    ``segment_sum(row_scale(index_rows(x, src), w), dst, num_segments)`` without
    materialising the per-instance rows.  ``w`` is an (n x 1) column.
    """
    x, w = as_tensor(x), as_tensor(w)
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    if w.shape != (len(src), 1) or len(dst) != len(src):
        raise ShapeError(f"weighted_scatter: {len(src)} sources, {len(dst)} destinations, weights {list(w.shape)}")
    m = sparse.csr_matrix((w.data[:, 0], (dst, src)), shape=(num_segments, x.shape[0]))
    out = np.asarray(m @ x.data)

    def back(g):
        if x.requires_grad:
            _accum(x, np.asarray(m.T @ g))
        if w.requires_grad:
            _accum(w, np.einsum("ij,ij->i", g[dst], x.data[src])[:, None])

    return _make(out, (x, w), back, "weighted_scatter")


def _segment_max(values, segment_ids, num_segments):
    m = np.full(num_segments, -np.inf)
    np.maximum.at(m, segment_ids, values)
    return m


def segment_softmax(logits, segment_ids, num_segments):
    """Softmax of an (n x 1) column within each segment, stabilised by the segment max."""
    logits = as_tensor(logits)
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    if logits.data.ndim != 2 or logits.shape[1] != 1:
        raise ShapeError(f"segment_softmax expects an n x 1 column, got {list(logits.shape)}")
    v = logits.data[:, 0]
    if v.size == 0:
        return _make(np.zeros((0, 1)), (logits,), lambda g: None, "segment_softmax")
    e = np.exp(v - _segment_max(v, segment_ids, num_segments)[segment_ids])
    denom = scatter_rows(e, segment_ids, num_segments)
    q = (e / denom[segment_ids])[:, None]

    def back(g):
        dot = scatter_rows((g * q)[:, 0], segment_ids, num_segments)
        _accum(logits, q * (g - dot[segment_ids][:, None]))

    return _make(q, (logits,), back, "segment_softmax")


def softmax(x):
    """Row-wise softmax with max subtraction."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        _accum(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y, (x,), back, "softmax")


def log_softmax(x):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def back(g):
        _accum(x, g - p * g.sum(axis=-1, keepdims=True))

    return _make(y, (x,), back, "log_softmax")


def nll_of_logsoftmax(logits, labels):
    """Mean of ``-log softmax(logits)[i, labels[i]]`` over rows.

    ``logits`` is (N x C); a single 1 x C row takes a scalar label.
    """
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"nll: logits must be N x C, got {list(logits.shape)}")
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"nll: {labels.shape[0]} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"nll: label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    value = -logp[rows, labels].mean()

    def back(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        _accum(logits, grad * (float(g) / n))

    return _make(np.array(value), (logits,), back, "nll")


# ---------------------------------------------------------------------------
# backward


def topological_order(root):
    """Nodes reachable from ``root`` that require grad, inputs before outputs."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(param) into ``param.grad`` for every reachable Parameter."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    order = topological_order(loss)
    for node in order:
        if not isinstance(node, Parameter):
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)
    # intermediate grads are no longer needed
    for node in order:
        if not isinstance(node, Parameter):
            node.grad = None


# ---------------------------------------------------------------------------
# parameters


def glorot_uniform(shape, rng):
    bound = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-bound, bound, size=shape)


class ParameterStore:
    """Ordered collection of named parameters."""

    def __init__(self):
        self._params = OrderedDict()

    def create(self, name, shape, rng, init="glorot"):
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        if init == "glorot":
            value = glorot_uniform(shape, rng)
        elif init == "zeros":
            value = np.zeros(shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        p = Parameter(name, value)
        self._params[name] = p
        return p

    def add(self, param):
        self._params[param.name] = param
        return param

    def __getitem__(self, name):
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"missing parameter {name!r}") from None

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def zero_grad(self):
        for p in self:
            p.grad[...] = 0.0

    def snapshot(self):
        return {p.name: p.data.copy() for p in self}

    def load_snapshot(self, values):
        for name, value in values.items():
            self[name].data[...] = value

    def save(self, path):
        """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian float64)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        manifest, offset, chunks = [], 0, []
        for p in self:
            manifest.append({"name": p.name, "shape": list(p.shape), "offset": offset})
            raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
            chunks.append(raw)
            offset += len(raw)
        path.with_suffix(".json").write_text(json.dumps({"parameters": manifest}, indent=2) + "\n",
                                          encoding="utf-8")
        path.with_suffix(".bin").write_bytes(b"".join(chunks))

    @classmethod
    def load(cls, path):
        path = Path(path)
        manifest = json.loads(path.with_suffix(".json").read_text())
        blob = path.with_suffix(".bin").read_bytes()
        store = cls()
        for entry in manifest["parameters"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape))
            values = np.frombuffer(blob, dtype="<f8", count=count, offset=entry["offset"])
            store.add(Parameter(entry["name"], values.reshape(shape).astype(np.float64)))
        return store


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    """One Adam update with L2 regularisation folded into the gradient, then zero the grads."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for p in params:
        g = p.grad + weight_decay * p.data if weight_decay else p.grad
        p.step_count += 1
        p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * g * g
        m_hat = p.adam_m / (1.0 - beta1 ** p.step_count)
        v_hat = p.adam_v / (1.0 - beta2 ** p.step_count)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.grad[...] = 0.0
