"""A small reverse-mode autodiff engine on float64 numpy arrays.

Tensors record the op that produced them and a closure that pushes the
output gradient to their inputs. ``Tensor.backward`` walks the graph once in
reverse topological order. Inside ``no_grad()`` nothing is recorded, which is
how rollouts evaluate the networks.
"""

from __future__ import annotations

import contextlib
import json
import os
from collections import OrderedDict

import numpy as np
from scipy import sparse

_GRAD_ENABLED = [True]


class GraphFault(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape})"

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise GraphFault("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order = topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def topo_order(root):
    """Nodes reachable from ``root`` in topological order (inputs first), each once."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op):
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn, op)
    return Tensor(data, False, (), None, op)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def matmul(x, w):
    """``x`` (..., n) times a 2-D ``w`` (n, m)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.data.ndim != 2 or x.data.shape[-1] != w.data.shape[0]:
        raise GraphFault(f"matmul: shapes {x.shape} and {w.shape} do not align")

    def back(g):
        gx = g @ w.data.T
        gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return gx, gw

    return _node(_rows_matmul(x.data, w.data), (x, w), back, "matmul")


def _rows_matmul(x, w):
    # BLAS takes different paths for a single row and for some narrow output
    # widths; pad so every entry is computed identically whatever the batch size
    m = w.shape[1]
    flat = x.reshape(-1, x.shape[-1])
    if m % 8:
        w = np.hstack([w, np.zeros((w.shape[0], 8 - m % 8))])
    if flat.shape[0] == 1:
        out = (np.vstack([flat, np.zeros_like(flat)]) @ w)[:1]
    else:
        out = flat @ w
    return out[:, :m].reshape(x.shape[:-1] + (m,))


def bmm(a, b):
    """Batched matmul with identical leading dims: (..., p, q) @ (..., q, r)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise GraphFault(f"bmm: shapes {a.shape} and {b.shape} do not align")
    return _node(np.matmul(a.data, b.data), (a, b),
                 lambda g: (np.matmul(g, np.swapaxes(b.data, -1, -2)),
                            np.matmul(np.swapaxes(a.data, -1, -2), g)), "bmm")


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _node(out, (x,), back, "sum")


def tmean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x, shape):
    x = as_tensor(x)
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def take(x, idx):
    """Numpy-style indexing; the backward scatters with ``np.add.at``."""
    x = as_tensor(x)

    def back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _node(x.data[idx], (x,), back, "take")


def gather_rows(x, index):
    """Rows of ``x`` (n, ...) selected by an integer array of any shape."""
    x = as_tensor(x)
    index = np.asarray(index)

    def back(g):
        return (_scatter_rows(index.reshape(-1), g.reshape((-1,) + x.shape[1:]), x.shape),)

    return _node(x.data[index], (x,), back, "gather")


def _scatter_rows(flat, g, shape):
    # a sparse one-hot product is much faster than np.add.at for many repeated rows
    n = flat.size
    onehot = sparse.csr_matrix((np.ones(n), (flat, np.arange(n))), shape=(shape[0], n))
    return np.asarray(onehot @ g.reshape(n, -1)).reshape(shape)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def where(cond, a, b):
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return _node(np.where(cond, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                            _unbroadcast(np.where(cond, 0.0, g), b.shape)), "where")


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return where(a.data <= b.data, a, b)


def detach(x):
    return Tensor(as_tensor(x).data)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    x = as_tensor(x)
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sigmoid(x):
    x = as_tensor(x)
    out = _stable_sigmoid(x.data)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _stable_sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


def clip(x, lo, hi):
    """Clamp; the gradient is zero where the clamp is active."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


def linear(x, w, b):
    """Affine map with ``w`` stored as (n_in, n_out)."""
    return add(matmul(x, w), b)


def layer_norm(x, gamma, beta, eps=1e-5):
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        gg = g * gamma.data
        n = x.shape[-1]
        gx = inv / n * (n * gg - gg.sum(-1, keepdims=True) - xhat * (gg * xhat).sum(-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _node(xhat * gamma.data + beta.data, (x, gamma, beta), back, "layer_norm")


def softmax(logits, axis=-1):
    """Max-subtracted softmax; rejects non-finite logits."""
    z = as_tensor(logits)
    if not np.all(np.isfinite(z.data)):
        raise GraphFault("softmax: non-finite logit")
    e = np.exp(z.data - z.data.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)
    return _node(p, (z,), lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),), "softmax")


def masked_softmax(scores, mask):
    """Softmax over the last axis restricted to ``mask``; fully masked rows give zeros."""
    s = as_tensor(scores)
    mask = np.asarray(mask, dtype=bool)
    big = np.where(mask, s.data, -np.inf)
    m = np.max(big, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(np.where(mask, s.data, 0.0) - m), 0.0)
    z = e.sum(axis=-1, keepdims=True)
    p = e / np.where(z > 0, z, 1.0)
    return _node(p, (s,), lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),), "masked_softmax")


def log_softmax(logits, axis=-1):
    z = as_tensor(logits)
    if not np.all(np.isfinite(z.data)):
        raise GraphFault("log_softmax: non-finite logit")
    shifted = z.data - z.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _node(out, (z,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def bce_with_logits(z, label):
    """Elementwise binary cross-entropy on logits, written as max(z,0) - z*y + log(1+exp(-|z|))."""
    z = as_tensor(z)
    y = np.asarray(label, dtype=np.float64)
    loss = np.maximum(z.data, 0.0) - z.data * y + np.log1p(np.exp(-np.abs(z.data)))
    return _node(loss, (z,), lambda g: (g * (_stable_sigmoid(z.data) - y),), "bce")


def attention(query, keys, values, mask=None):
    """Scaled dot-product attention for a batch of queries.

    query (n, d); keys (n, P, d); values (n, P, dv); mask (n, P). Queries with
    no valid key return the zero vector.
    """
    q, k, v = as_tensor(query), as_tensor(keys), as_tensor(values)
    if k.shape[1] == 0:
        return mul(tsum(v, axis=1), 0.0) if v.shape[1] else Tensor(np.zeros((q.shape[0], v.shape[-1])))
    if mask is None:
        mask = np.ones(k.shape[:2], dtype=bool)
    d = q.shape[-1]
    scores = reshape(bmm(k, reshape(q, q.shape + (1,))), k.shape[:2])
    p = masked_softmax(mul(scores, 1.0 / np.sqrt(d)), mask)
    return reshape(bmm(reshape(p, (p.shape[0], 1, p.shape[1])), v), (q.shape[0], v.shape[-1]))


# ---------------------------------------------------------------------------
# parameters, optimisation, checkpoints

CHECKPOINT_VERSION = 1


class ParamStore:
    """Named float64 parameters with gradients, Adam moments and a step counter."""

    def __init__(self):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.moments = {}
        self.step = 0

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self, prefix=""):
        return [n for n in self.params if n.startswith(prefix)]

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def arrays(self, prefix=""):
        return OrderedDict((n, t.data) for n, t in self.params.items() if n.startswith(prefix))

    def set_requires_grad(self, prefix, flag):
        for n in self.names(prefix):
            self.params[n].requires_grad = flag

    def copy(self):
        out = ParamStore()
        for n, t in self.params.items():
            out.add(n, t.data.copy()).requires_grad = t.requires_grad
        out.moments = {k: (m.copy(), v.copy(), s) for k, (m, v, s) in self.moments.items()}
        out.step = self.step
        return out

    def check_finite(self):
        for n, t in self.params.items():
            if not np.all(np.isfinite(t.data)):
                raise GraphFault(f"parameter {n} became non-finite")

    def n_params(self, prefix=""):
        return sum(t.data.size for n, t in self.params.items() if n.startswith(prefix))

    # checkpoint container: manifest.json + arrays.bin (row-major little-endian float64)
    def save(self, path):
        os.makedirs(path, exist_ok=True)
        entries, offset = [], 0
        with open(os.path.join(path, "arrays.bin"), "wb") as fh:
            for n, t in self.params.items():
                buf = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
                fh.write(buf)
                entries.append({"name": n, "shape": list(t.data.shape), "offset": offset, "nbytes": len(buf)})
                offset += len(buf)
        manifest = {"version": CHECKPOINT_VERSION, "step": self.step, "arrays": entries}
        with open(os.path.join(path, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(os.path.join(path, "manifest.json")) as fh:
            manifest = json.load(fh)
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest.get('version')!r}")
        with open(os.path.join(path, "arrays.bin"), "rb") as fh:
            blob = fh.read()
        store = cls()
        for e in manifest["arrays"]:
            a = np.frombuffer(blob, dtype="<f8", count=int(np.prod(e["shape"], dtype=int)), offset=e["offset"])
            store.add(e["name"], a.reshape(e["shape"]).astype(np.float64))
        store.step = int(manifest.get("step", 0))
        return store


def adamw_update(store: ParamStore, lr, weight_decay=0.01, beta1=0.9, beta2=0.999, eps=1e-8, prefixes=("",)):
    """Decoupled weight-decay Adam on every parameter under ``prefixes`` that has a gradient.

    Gradients of updated parameters are cleared afterwards.
    """
    store.step += 1
    for name, t in store.params.items():
        if not any(name.startswith(p) for p in prefixes) or t.grad is None:
            continue
        g = t.grad
        m, v, s = store.moments.get(name, (np.zeros_like(t.data), np.zeros_like(t.data), 0))
        s += 1
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** s)
        vhat = v / (1 - beta2 ** s)
        t.data = t.data - lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * t.data)
        store.moments[name] = (m, v, s)
        t.grad = None
        if not np.all(np.isfinite(t.data)):
            raise GraphFault(f"parameter {name} became non-finite")


def grad_check(f, store: ParamStore, names=None, frac=0.05, h=1e-5, seed=0, min_coords=20, per_tensor=0):
    """Compare analytic gradients of scalar ``f(store)`` against central differences.

    Samples ``frac`` of the coordinates (at least ``min_coords``), or exactly
    ``per_tensor`` coordinates from every tensor when that is positive, and
    returns the max over them of |analytic - numeric| / max(1, |numeric|).
    """
    names = list(store.params) if names is None else list(names)
    store.zero_grad()
    f(store).backward()
    analytic = {n: (store[n].grad if store[n].grad is not None else np.zeros_like(store[n].data)) for n in names}
    for n, g in analytic.items():
        if not np.all(np.isfinite(g)):
            raise GraphFault(f"non-finite analytic gradient for {n}")
    store.zero_grad()
    sizes = np.array([store[n].data.size for n in names])
    bounds = np.cumsum(sizes)
    rng = np.random.default_rng(seed)
    if per_tensor > 0:
        starts = bounds - sizes
        picks = np.concatenate([st + rng.choice(sz, size=min(sz, per_tensor), replace=False)
                                for st, sz in zip(starts, sizes)])
    else:
        total = int(sizes.sum())
        count = min(total, max(min_coords, int(round(frac * total))))
        picks = np.sort(rng.choice(total, size=count, replace=False))
    worst = 0.0
    with no_grad():
        for flat in picks:
            k = int(np.searchsorted(bounds, flat, side="right"))
            local = flat - (bounds[k - 1] if k else 0)
            arr = store[names[k]].data.reshape(-1)
            orig = arr[local]
            arr[local] = orig + h
            fp = f(store).item()
            arr[local] = orig - h
            fm = f(store).item()
            arr[local] = orig
            num = (fp - fm) / (2 * h)
            a = analytic[names[k]].reshape(-1)[local]
            worst = max(worst, abs(a - num) / max(1.0, abs(num)))
    return worst
