"""A small reverse-mode autodiff engine over numpy arrays.

Operations record themselves on the active :class:`Tape` (set with a
``with Tape() as tape:`` block) whenever any input requires a gradient.
Outside a tape, ops simply compute forward values, which is what inference
uses.

Summation order is fixed: matrix products go through BLAS on row-major
operands and :func:`weighted_sum` accumulates its source rows in index
order, so a forward pass is bitwise repeatable for a given input.
"""
import contextvars
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import kernels

_ACTIVE_TAPE = contextvars.ContextVar("lrcnet_tape", default=None)

# Check every op output for NaN/Inf. Costs one pass over each result.
CHECK_FINITE = True


class NonFiniteError(FloatingPointError):
    def __init__(self, where):
        super().__init__(f"non-finite values produced by {where}")
        self.where = where


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


class _Node:
    __slots__ = ("op", "out", "inputs", "backward")

    def __init__(self, op, out, inputs, backward):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Records primitive applications in execution order."""

    def __init__(self):
        self.nodes: List[_Node] = []
        self.consumed = False
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def record(self, op, out, inputs, backward):
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        self.nodes.append(_Node(op, out, inputs, backward))

    def backward(self, loss, wrt):
        """Gradients of scalar ``loss`` with respect to each tensor in ``wrt``.

        Also stores them on ``t.grad``. Tensors the loss does not depend on
        get zero gradients.
        """
        if self.consumed:
            raise TapeError("backward() called twice on the same tape")
        if loss.data.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        self.consumed = True
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = []
        for t in wrt:
            g = grads.get(id(t))
            g = np.zeros_like(t.data) if g is None else g.reshape(t.shape).astype(t.dtype, copy=False)
            t.grad = g
            out.append(g)
        self.nodes = []
        return out


def active_tape():
    return _ACTIVE_TAPE.get()


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op, data, inputs, backward):
    if CHECK_FINITE and not np.isfinite(data).all():
        raise NonFiniteError(op)
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = _ACTIVE_TAPE.get()
    if needs and tape is not None:
        tape.record(op, out, tuple(inputs), backward)
    return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def linear(x, W, b=None):
    """y = x @ W + b over the last axis of x."""
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight rows {W.shape[0]}")
    x2 = x.data.reshape(-1, x.shape[-1])
    y = x2 @ W.data
    inputs = [x, W]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ValueError(f"linear: bias shape {b.shape} != ({W.shape[1]},)")
        y += b.data
        inputs.append(b)
    out_shape = x.shape[:-1] + (W.shape[1],)

    def backward(g):
        g2 = g.reshape(-1, W.shape[1])
        gx = (g2 @ W.data.T).reshape(x.shape) if x.requires_grad else None
        gW = x2.T @ g2 if W.requires_grad else None
        if b is None:
            return gx, gW
        return gx, gW, np.ones(g2.shape[0], dtype=g2.dtype) @ g2

    return _emit("linear", y.reshape(out_shape), inputs, backward)


def relu(x):
    x = as_tensor(x)
    y = np.maximum(x.data, 0)

    def backward(g):
        return (g * (y > 0),)

    return _emit("relu", y, [x], backward)


def linear_relu(x, W, b):
    """relu(linear(x, W, b)) with one fewer temporary; same values as composing."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight rows {W.shape[0]}")
    x2 = x.data.reshape(-1, x.shape[-1])
    y = x2 @ W.data
    y += b.data
    np.maximum(y, 0, out=y)

    def backward(g):
        g2 = g.reshape(-1, W.shape[1])
        g2 = g2 * (y > 0)
        gx = (g2 @ W.data.T).reshape(x.shape) if x.requires_grad else None
        gb = np.ones(g2.shape[0], dtype=g2.dtype) @ g2
        return gx, x2.T @ g2, gb

    return _emit("linear_relu", y.reshape(x.shape[:-1] + (W.shape[1],)), [x, W, b], backward)


def max_reduce(x, axis):
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    nd = x.data.ndim
    axis = axis % nd
    if x.shape[axis] < 1:
        raise ValueError("max_reduce over an empty axis")
    lead = int(np.prod(x.shape[:axis], dtype=np.int64))
    k = x.shape[axis]
    x3 = x.data.reshape(lead, k, -1)
    y, arg = kernels.max_argmax(x3)
    out_shape = x.shape[:axis] + x.shape[axis + 1:]

    def backward(g):
        gx = np.zeros(x3.shape, dtype=g.dtype)
        np.put_along_axis(gx, arg[:, None, :], g.reshape(lead, 1, -1), axis=1)
        return (gx.reshape(x.shape),)

    return _emit("max_reduce", y.reshape(out_shape), [x], backward)


def sum_reduce(x, axis=None):
    x = as_tensor(x)
    y = np.sum(x.data, axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _emit("sum_reduce", np.asarray(y), [x], backward)


def mean_reduce(x, axis):
    x = as_tensor(x)
    n = x.shape[axis]
    y = np.mean(x.data, axis=axis)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), x.shape).copy(),)

    return _emit("mean_reduce", y, [x], backward)


def concat(xs, axis):
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise ValueError("concat of nothing")
    nd = xs[0].data.ndim
    axis = axis % nd
    for t in xs[1:]:
        if t.data.ndim != nd or any(a != b for i, (a, b) in enumerate(zip(t.shape, xs[0].shape)) if i != axis):
            raise ValueError(f"concat: incompatible shapes {[t.shape for t in xs]}")
    y = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", y, xs, backward)


def reshape(x, shape):
    x = as_tensor(x)
    y = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _emit("reshape", y, [x], backward)


def take(x, idx, axis):
    """Gather along ``axis`` with an integer index array (any shape)."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    axis = axis % x.data.ndim
    y = np.take(x.data, idx, axis=axis)

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        # move gathered axes to the front and accumulate in index order
        gm = np.moveaxis(g, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim)))
        gm = gm.reshape((idx.size,) + gm.shape[idx.ndim:])
        gxm = np.moveaxis(gx, axis, 0)
        for pos, i in enumerate(idx.ravel()):
            gxm[i] += gm[pos]
        return (gx,)

    return _emit("take", y, [x], backward)


def scale(x, c):
    """Elementwise product with a constant array broadcastable to x."""
    x = as_tensor(x)
    c = np.asarray(c, dtype=x.dtype)
    y = x.data * c

    def backward(g):
        gx = g * c
        if gx.shape != x.shape:
            gx = np.broadcast_to(gx, x.shape).copy()
        return (gx,)

    return _emit("scale", y, [x], backward)


def divide(x, c):
    """Elementwise quotient by a constant array broadcastable to x."""
    x = as_tensor(x)
    c = np.asarray(c, dtype=x.dtype)
    y = x.data / c

    def backward(g):
        gx = g / c
        if gx.shape != x.shape:
            gx = np.broadcast_to(gx, x.shape).copy()
        return (gx,)

    return _emit("divide", y, [x], backward)


def expand(x, axis, n):
    """Insert a new axis of length n at ``axis`` by repetition."""
    x = as_tensor(x)
    y = np.repeat(np.expand_dims(x.data, axis), n, axis=axis)

    def backward(g):
        return (g.sum(axis=axis),)

    return _emit("expand", y, [x], backward)


def weighted_sum(weights, x):
    """out[..., j, :] = sum_b weights[..., j, b] * x[..., b, :].

    ``weights`` is a constant. Terms are accumulated for b = 0, 1, ... in
    order, which makes e.g. all-ones weights reproduce a sequential sum.
    """
    x = as_tensor(x)
    w = np.asarray(weights, dtype=x.dtype)
    if w.shape[-1] != x.shape[-2] or w.shape[:-2] != x.shape[:-2]:
        raise ValueError(f"weighted_sum: weights {w.shape} do not match input {x.shape}")
    y = w[..., :, 0, None] * x.data[..., None, 0, :]
    for b in range(1, x.shape[-2]):
        y += w[..., :, b, None] * x.data[..., None, b, :]

    def backward(g):
        return (np.swapaxes(w, -1, -2) @ g,)

    return _emit("weighted_sum", y, [x], backward)


def gather_interpolate(src, idx, w, scatter=None):
    """out[b, a] = sum_i w[b, a, i] * src[b, idx[b, a, i]] for src [B, S, C]."""
    src = as_tensor(src)
    idx = np.asarray(idx, dtype=np.int64)
    w = np.asarray(w, dtype=src.dtype)
    bsel = np.arange(src.shape[0])[:, None]
    y = w[..., 0, None] * src.data[bsel, idx[..., 0]]
    for i in range(1, idx.shape[-1]):
        y += w[..., i, None] * src.data[bsel, idx[..., i]]

    fn = kernels.scatter_rows if scatter is None else scatter

    def backward(g):
        return (np.stack([fn(idx[b], w[b], g[b], src.shape[1]) for b in range(src.shape[0])]),)

    return _emit("gather_interpolate", y, [src], backward)


def dropout(x, rate, rng, training):
    """Inverted dropout; identity in eval mode or when rate == 0."""
    x = as_tensor(x)
    if not training or rate <= 0:
        return x
    keep = rng.random(x.shape) >= rate
    return scale(x, keep.astype(x.dtype) / (1.0 - rate))


def softmax_cross_entropy(logits, targets):
    """Mean over rows of -log softmax(logits)[target]."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.int64)
    n, c = logits.shape
    if t.shape != (n,):
        raise ValueError(f"targets shape {t.shape} != ({n},)")
    if t.size and (t.min() < 0 or t.max() >= c):
        raise ValueError(f"target outside [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    se = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(se)
    rows = np.arange(n)
    loss = -logp[rows, t].mean()

    def backward(g):
        p = ez / se
        p[rows, t] -= 1.0
        return (p * (g / n),)

    return _emit("softmax_cross_entropy", np.asarray(loss, dtype=logits.dtype), [logits], backward)
