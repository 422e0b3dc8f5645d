"""Minimal dense-tensor autodiff core.

Define-by-run reverse-mode differentiation over numpy float64 arrays,
restricted to rank 1/2/3 tensors (vectors, matrices, batched matrices).
There is no implicit broadcasting: elementwise ops require identical
shapes, and the explicit ``broadcast_to`` / ``reshape`` ops cover the
few places (bias rows, layer-norm affine) where shapes must be lifted.

The graph is held alive by ordinary Python references: every op result
keeps a tuple of its parents and a backward closure.  ``grad`` (and
``backward``) may therefore be called repeatedly on the same graph;
each call re-seeds and re-accumulates leaf gradients from zero, so the
graph is reusable and is freed by the garbage collector once the caller
drops the loss tensor.

``stop_gradient`` keeps its argument as a graph parent (so the argument
still counts as "in the graph" for ``grad``'s reachability check) but
propagates an exactly-zero gradient through the node.
"""

from __future__ import annotations

import numpy as np

# Flipped on by tests / debugging sessions: validates that every op
# result is finite, at the cost of a full scan per op.
CHECK_FINITE = False


class Tensor:
    """A dense float64 array plus its place in the autodiff graph.

    Leaves are built directly from data (``Tensor(values, requires_grad=True)``
    for trainable parameters, ``requires_grad=False`` for constants such as
    inputs, labels and attention masks).  Interior nodes are produced by the
    module-level ops and carry a backward closure.
    """

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, values, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim > 3:
            raise ValueError(f"rank {arr.ndim} tensor not supported (max rank 3)")
        if CHECK_FINITE and not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite values in tensor")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    def item(self):
        return float(self.values)

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar (scalars allowed on elementwise ops) --

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


def _result(values, parents, backward):
    needs = any(p.requires_grad for p in parents)
    return Tensor(values, requires_grad=needs, _parents=tuple(parents),
                  _backward=backward if needs else None)


def _check_same_shape(a, b, op):
    if a.values.shape != b.values.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} "
                         "(no implicit broadcasting; use broadcast_to)")


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b):
    if isinstance(b, (int, float)):
        out_vals = a.values + float(b)

        def bwd(g):
            if a.requires_grad:
                a.accumulate_grad(g)
        return _result(out_vals, (a,), bwd)
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "add")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)
    return _result(a.values + b.values, (a, b), bwd)


def sub(a, b):
    if isinstance(b, (int, float)):
        return add(a, -float(b))
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "sub")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-g)
    return _result(a.values - b.values, (a, b), bwd)


def mul(a, b):
    if isinstance(b, (int, float)):
        s = float(b)

        def bwd_s(g):
            if a.requires_grad:
                a.accumulate_grad(g * s)
        return _result(a.values * s, (a,), bwd_s)
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "mul")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.values)
        if b.requires_grad:
            b.accumulate_grad(g * a.values)
    return _result(a.values * b.values, (a, b), bwd)


def power(a, p):
    """Elementwise a**p for a scalar exponent (covers square, sqrt, 1/x)."""
    p = float(p)
    out_vals = a.values ** p

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * p * a.values ** (p - 1.0))
    return _result(out_vals, (a,), bwd)


def exp(a):
    out_vals = np.exp(a.values)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * out_vals)
    return _result(out_vals, (a,), bwd)


def log(a):
    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g / a.values)
    return _result(np.log(a.values), (a,), bwd)


def tanh(a):
    out_vals = np.tanh(a.values)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * (1.0 - out_vals ** 2))
    return _result(out_vals, (a,), bwd)


def sigmoid(a):
    # Stable in both tails: 1/(1+e^-x) rewritten via where on the sign.
    x = a.values
    out_vals = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * out_vals * (1.0 - out_vals))
    return _result(out_vals, (a,), bwd)


def clip(a, lo, hi):
    """Clamp values to [lo, hi]; gradient passes through only inside the bounds."""
    out_vals = np.clip(a.values, lo, hi)
    passthrough = (a.values >= lo) & (a.values <= hi)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * passthrough)
    return _result(out_vals, (a,), bwd)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a, shape):
    shape = tuple(shape)
    out_vals = a.values.reshape(shape)
    in_shape = a.values.shape

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(in_shape))
    return _result(out_vals, (a,), bwd)


def broadcast_to(a, shape):
    """Explicit broadcast (trailing-dim aligned); backward sums the lifted axes."""
    shape = tuple(shape)
    out_vals = np.broadcast_to(a.values, shape)
    in_shape = a.values.shape

    def bwd(g):
        if not a.requires_grad:
            return
        gg = g
        # collapse prepended axes, then axes that were size 1
        while gg.ndim > len(in_shape):
            gg = gg.sum(axis=0)
        for ax, n in enumerate(in_shape):
            if n == 1 and gg.shape[ax] != 1:
                gg = gg.sum(axis=ax, keepdims=True)
        a.accumulate_grad(gg)
    return _result(np.array(out_vals), (a,), bwd)


def transpose_last(a):
    """Swap the last two axes (matrix transpose; batch axis untouched)."""
    if a.ndim < 2:
        raise ValueError("transpose_last needs rank >= 2")
    out_vals = np.swapaxes(a.values, -1, -2)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.swapaxes(g, -1, -2))
    return _result(out_vals, (a,), bwd)


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out_vals = a.values[idx]

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.values)
            full[idx] = g
            a.accumulate_grad(full)
    return _result(np.array(out_vals), (a,), bwd)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out_vals = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.values.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])
    return _result(out_vals, tuple(tensors), bwd)


def embedding(table, indices):
    """Gather rows of a (V, d) table; indices is an integer ndarray (any shape)."""
    indices = np.asarray(indices)
    if not np.issubdtype(indices.dtype, np.integer):
        raise ValueError("embedding indices must be integers")
    out_vals = np.take(table.values, indices, axis=0)

    def bwd(g):
        if table.requires_grad:
            full = np.zeros_like(table.values)
            np.add.at(full, indices, g)
            table.accumulate_grad(full)
    return _result(out_vals, (table,), bwd)


# ---------------------------------------------------------------------------
# contractions and reductions
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product for (2d,2d), batched (3d,3d) and (3d,2d) operands."""
    na, nb = a.ndim, b.ndim
    if (na, nb) not in ((2, 2), (3, 3), (3, 2)):
        raise ValueError(f"matmul: unsupported ranks {na}@{nb} (reshape explicitly)")
    if a.values.shape[-1] != b.values.shape[-2 if nb > 1 else 0]:
        raise ValueError(f"matmul: inner dims {a.shape} @ {b.shape}")
    if (na, nb) == (3, 3) and a.values.shape[0] != b.values.shape[0]:
        raise ValueError(f"matmul: batch dims {a.shape} @ {b.shape}")
    out_vals = a.values @ b.values

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g @ np.swapaxes(b.values, -1, -2))
        if b.requires_grad:
            if (na, nb) == (3, 2):
                d_in, d_out = b.values.shape
                gb = a.values.reshape(-1, d_in).T @ g.reshape(-1, d_out)
            else:
                gb = np.swapaxes(a.values, -1, -2) @ g
            b.accumulate_grad(gb)
    return _result(out_vals, (a, b), bwd)


def tsum(a, axis=None, keepdims=False):
    out_vals = a.values.sum(axis=axis, keepdims=keepdims)
    in_shape = a.values.shape

    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            a.accumulate_grad(np.broadcast_to(g, in_shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a.accumulate_grad(np.broadcast_to(gg, in_shape))
    return _result(out_vals, (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    n = a.values.size if axis is None else a.values.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a, axis=-1):
    """Stable softmax along one axis; rows of all -inf are rejected.

    -inf entries (additive masks) produce exactly-zero probabilities.
    """
    x = a.values
    m = np.max(x, axis=axis, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise FloatingPointError("softmax: a full slice is masked to -inf")
    e = np.exp(x - m)
    out_vals = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            dot = (g * out_vals).sum(axis=axis, keepdims=True)
            a.accumulate_grad(out_vals * (g - dot))
    return _result(out_vals, (a,), bwd)


def stop_gradient(a):
    """Identity forward; exactly zero gradient flows to the argument.

    The argument stays linked as a parent so it still counts as part of
    the graph for ``grad``'s reachability check.
    """
    return Tensor(a.values, requires_grad=False, _parents=(a,), _backward=None)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Per-row (last axis) zero-mean unit-variance, then affine gamma/beta.

    gamma/beta are rank-1 of size d = x.shape[-1]; eps guards constant rows.
    """
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm: gamma/beta must have shape ({d},)")
    mu = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, broadcast_to(mu, x.shape))
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    inv_std = power(add(var, eps), -0.5)
    normed = mul(centered, broadcast_to(inv_std, x.shape))
    lift = (1,) * (x.ndim - 1) + (d,)
    g = broadcast_to(reshape(gamma, lift), x.shape)
    b = broadcast_to(reshape(beta, lift), x.shape)
    return add(mul(normed, g), b)


# ---------------------------------------------------------------------------
# backward driver
# ---------------------------------------------------------------------------

def _toposort(root):
    """Reverse-construction-order topological sort (iterative DFS)."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss):
    """Run reverse-mode accumulation from a scalar loss.

    Visits each graph node exactly once in reverse topological order.
    Gradients of every node reachable from ``loss`` are reset first, so
    repeated calls do not double-count.  Returns the topological order
    (handy for callers that need the reachable set).
    """
    if loss.values.ndim != 0:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = _toposort(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    return order


def grad(loss, params):
    """Gradient of a scalar loss w.r.t. a list of leaf parameters.

    A parameter that is not reachable in the loss graph is an error, not a
    silent zero.  A parameter that is reachable but receives no gradient
    (e.g. it only enters under ``stop_gradient``) gets an explicit zero.
    """
    for i, p in enumerate(params):
        if not p.requires_grad:
            raise ValueError(f"grad: params[{i}] does not have requires_grad set")
    order = backward(loss)
    in_graph = {id(n) for n in order}
    out = []
    for i, p in enumerate(params):
        if id(p) not in in_graph:
            raise ValueError(f"grad: params[{i}] is not part of the loss graph")
        out.append(p.grad if p.grad is not None else np.zeros_like(p.values))
    return out


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class SGD:
    """Plain gradient descent: p <- p - lr * g."""

    def __init__(self, params, lr=0.01):
        self.params = list(params)
        self.lr = float(lr)
        self.step_count = 0

    def step(self, grads):
        if len(grads) != len(self.params):
            raise ValueError("SGD.step: grads/params length mismatch")
        for p, g in zip(self.params, grads):
            if g.shape != p.values.shape:
                raise ValueError(f"SGD.step: grad shape {g.shape} vs param {p.shape}")
            p.values -= self.lr * g
        self.step_count += 1


class Adam:
    """Adam with bias correction; deterministic given the step counter."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]
        self.step_count = 0

    def step(self, grads):
        if len(grads) != len(self.params):
            raise ValueError("Adam.step: grads/params length mismatch")
        self.step_count += 1
        t = self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.values.shape:
                raise ValueError(f"Adam.step: grad shape {g.shape} vs param {p.shape}")
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            p.values -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# init helpers
# ---------------------------------------------------------------------------

def glorot(rng, shape):
    """Glorot-uniform leaf parameter."""
    fan_in = shape[0] if len(shape) > 1 else shape[0]
    fan_out = shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def zeros(shape, requires_grad=True):
    return Tensor(np.zeros(shape), requires_grad=requires_grad)
