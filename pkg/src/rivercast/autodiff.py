"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations needed by the river network model are provided. Values are
numpy arrays (float64 unless requested otherwise). Operations executed while a
:class:`Tape` is active are recorded; ``Tape.backward`` replays them in reverse
execution order and accumulates gradients into leaf tensors.

    >>> w = Tensor(np.ones((2, 2)), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(w)
    ...     tape.backward(loss)
    >>> w.grad
    array([[1., 1.],
           [1., 1.]])
"""
from __future__ import annotations

import math

import numpy as np
from scipy import special

_ACTIVE = []

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A dense array with an optional gradient accumulator."""

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None, dtype=None):
        if isinstance(value, Tensor):
            value = value.value
        if dtype is None:
            dtype = value.dtype if isinstance(value, np.ndarray) and value.dtype.kind == "f" else np.float64
        self.value = np.asarray(value, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def detach(self):
        return Tensor(self.value, requires_grad=False, name=self.name)

    def zero_grad(self):
        self.grad = None

    def numpy(self):
        return self.value

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; operations run inside the block are recorded on
    the innermost active tape. A tape may be replayed once; call
    :meth:`reset` before reusing it.
    """

    def __init__(self):
        self._records = []
        self._leaves = {}
        self._used = False

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self._records)

    def reset(self):
        self._records = []
        self._leaves = {}
        self._used = False

    def _record(self, out, parents, backward_fn):
        self._records.append((out, parents, backward_fn))
        for p in parents:
            if p.requires_grad and id(p) not in self._leaves:
                self._leaves[id(p)] = p

    def backward(self, loss, params=None):
        """Propagate d(loss)/d(.) to every leaf recorded on this tape.

        Parameters
        ----------
        loss : Tensor
            A scalar (size-1) tensor produced on this tape.
        params : iterable of Tensor, optional
            Leaves whose ``grad`` must be populated; those not reachable from
            ``loss`` receive an all-zero gradient.

        Returns
        -------
        list of numpy.ndarray or None
            Gradients of ``params`` in the given order, if ``params`` was given.
        """
        if self._used:
            raise RuntimeError("backward already ran on this tape; call reset() first")
        if loss.value.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        self._used = True
        produced = {id(rec[0]) for rec in self._records}
        grads = {id(loss): np.ones_like(loss.value)}
        for out, parents, fn in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            pgrads = fn(g)
            for p, pg in zip(parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for key, leaf in self._leaves.items():
            if key in produced:
                continue
            g = grads.get(key)
            if g is None:
                continue
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        if params is None:
            return None
        out = []
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.value)
            out.append(p.grad)
        return out


def _tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, parents, backward_fn):
    out = Tensor(value)
    if _ACTIVE and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _ACTIVE[-1]._record(out, parents, backward_fn)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b):
    a, b = _tensor(a), _tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _tensor(a), _tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    """Elementwise (Hadamard) product with broadcasting."""
    a, b = _tensor(a), _tensor(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


hadamard = mul


def matmul(a, b):
    """``a @ b`` where ``b`` is 2-D and ``a`` has any number of leading axes."""
    a, b = _tensor(a), _tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        ga = g @ bv.T
        gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(av @ bv, (a, b), backward)


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    x, weight = _tensor(x), _tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    xv, wv = x.value, weight.value
    out = xv @ wv.T
    if bias is None:
        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            return g @ wv, g2.T @ xv.reshape(-1, xv.shape[-1])

        return _make(out, (x, weight), backward)
    bias = _tensor(bias)
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = out + bias.value

    def backward_b(g):
        g2 = g.reshape(-1, g.shape[-1])
        return g @ wv, g2.T @ xv.reshape(-1, xv.shape[-1]), g2.sum(axis=0)

    return _make(out, (x, weight, bias), backward_b)


def concat(tensors, axis=-1):
    tensors = [_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, range(bounds[k], bounds[k + 1]), axis=ax) for k in range(len(tensors)))

    return _make(np.concatenate([t.value for t in tensors], axis=ax), tuple(tensors), backward)


def stack(tensors, axis=0):
    tensors = [_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != ref:
            raise ShapeError(f"stack: shapes {ref} and {t.shape} differ")
    ax = axis % (len(ref) + 1)

    def backward(g):
        return tuple(np.take(g, k, axis=ax) for k in range(len(tensors)))

    return _make(np.stack([t.value for t in tensors], axis=ax), tuple(tensors), backward)


def take(x, index, axis=-1):
    """Select ``index`` (int, slice or integer array) along ``axis``."""
    x = _tensor(x)
    ax = axis % x.ndim
    sl = [slice(None)] * x.ndim
    sl[ax] = index
    sl = tuple(sl)
    shape = x.shape
    dtype = x.value.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if isinstance(index, (int, np.integer, slice)):
            full[sl] = g
        else:
            np.add.at(full, sl, g)
        return (full,)

    return _make(x.value[sl], (x,), backward)


def gelu(x):
    """Gaussian error linear unit, exact (erf) form."""
    x = _tensor(x)
    xv = x.value
    cdf = 0.5 * (1.0 + special.erf(xv / _SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xv * xv)
        return (g * (cdf + xv * pdf),)

    return _make(xv * cdf, (x,), backward)


def sigmoid(x):
    x = _tensor(x)
    y = special.expit(x.value)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x):
    x = _tensor(x)
    y = np.tanh(x.value)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def row_normalize_apply(adj, x):
    """Apply a sparse (N, N) operator along the node axis of ``x``.

    ``x`` has shape (..., N, d); the product is taken over N for every leading
    index, i.e. ``out[b] = adj @ x[b]``. ``adj`` is a scipy sparse matrix,
    typically ``D^-1 (A + I)`` from :func:`rivercast.network.adjacency_normalized`.
    """
    x = _tensor(x)
    if x.ndim < 2 or adj.shape[1] != x.shape[-2]:
        raise ShapeError(f"row_normalize_apply: operator {adj.shape} vs input {x.shape}")
    xv = x.value
    n, d = xv.shape[-2], xv.shape[-1]
    lead = xv.shape[:-2]

    def apply(m, v):
        flat = np.moveaxis(v.reshape(-1, n, d), 1, 0).reshape(n, -1)
        res = np.asarray(m @ flat)
        return np.moveaxis(res.reshape(m.shape[0], -1, d), 0, 1).reshape(lead + (m.shape[0], d))

    out = apply(adj, xv)
    return _make(out, (x,), lambda g: (apply(adj.T, g),))


def sum_all(x):
    x = _tensor(x)
    shape = x.shape
    return _make(np.asarray(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x):
    x = _tensor(x)
    shape, n = x.shape, x.value.size
    return _make(np.asarray(x.value.mean()), (x,), lambda g: (np.full(shape, g / n),))


def square(x):
    x = _tensor(x)
    xv = x.value
    return _make(xv * xv, (x,), lambda g: (2.0 * g * xv,))


def mean_square(a, b=None, weights=None):
    """Mean of ``(a - b)**2``; with ``weights`` the weighted mean ``sum(w e^2)/sum(w)``."""
    a = _tensor(a)
    if b is None:
        diff = a.value
    else:
        b = _tensor(b)
        if a.shape != b.shape:
            raise ShapeError(f"mean_square: shapes {a.shape} and {b.shape} differ")
        diff = a.value - b.value
    if weights is None:
        w = None
        denom = diff.size
        val = np.mean(diff * diff)
    else:
        w = np.broadcast_to(np.asarray(weights, dtype=diff.dtype), diff.shape)
        denom = w.sum()
        if denom <= 0:
            raise ValueError("mean_square: weights sum to zero")
        val = np.sum(w * diff * diff) / denom

    def backward(g):
        ga = 2.0 * g * diff / denom if w is None else 2.0 * g * w * diff / denom
        return (ga,) if b is None else (ga, -ga)

    parents = (a,) if b is None else (a, b)
    return _make(np.asarray(val), parents, backward)


def numerical_grad(fn, x, eps=1e-5):
    """Central finite-difference gradient of scalar ``fn()`` w.r.t. array ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        fp = float(fn())
        x[idx] = orig - eps
        fm = float(fn())
        x[idx] = orig
        g[idx] = (fp - fm) / (2.0 * eps)
    return g
