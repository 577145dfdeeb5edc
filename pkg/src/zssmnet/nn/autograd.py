"""Reverse-mode autodiff over numpy arrays, limited to the operators the
mesh network needs.

Activations are 5-D ``(N, C, Z, Y, X)`` arrays. A ``Node`` records its
parents and a closure mapping the output gradient to parent gradients;
``Node.backward`` walks the graph once in reverse topological order.
"""
from contextlib import contextmanager

import numpy as np

from . import backend


class ShapeError(ValueError):
    pass


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "op", "keep_grad")

    def __init__(self, value, parents=(), backward_fn=None, op="leaf", requires_grad=None):
        self.value = value
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.keep_grad = False

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable ``requires_grad`` leaf.

        Interior gradients are released as soon as they have been
        propagated unless ``keep_grad`` is set.
        """
        if grad is None:
            if self.value.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar node")
            grad = np.ones_like(self.value)
        order = _topo_order(self)
        self.grad = np.asarray(grad, dtype=self.value.dtype)
        for node in reversed(order):
            g = node.grad
            if g is None or node.backward_fn is None:
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = pg.copy() if pg is g else pg
                else:
                    parent.grad = parent.grad + pg
            if not node.keep_grad:
                node.grad = None


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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


class Parameter(Node):
    """Trainable leaf with a stable identifier and an SGD momentum buffer."""

    __slots__ = ("name", "momentum")

    def __init__(self, name, value):
        super().__init__(np.ascontiguousarray(value), op="param", requires_grad=True)
        self.name = name
        self.momentum = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


# branch patterns of non-smooth ops, recorded only inside record_branches()
_branch_log = None


@contextmanager
def record_branches():
    """Collect the branch taken by every kinked op evaluated in the block.

    Two evaluations with equal logs lie on the same smooth piece.
    """
    global _branch_log
    prev, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


def _note_branch(pattern):
    if _branch_log is not None:
        p = np.asarray(pattern)
        _branch_log.append(np.packbits(p) if p.dtype == bool else p.copy())


def constant(value, dtype=None):
    return Node(np.ascontiguousarray(value, dtype=dtype), requires_grad=False)


def _check_5d(node, opname):
    if node.value.ndim != 5:
        raise ShapeError(f"{opname}: expected a 5-D (N, C, Z, Y, X) input, got shape {node.shape}")


# ---------------------------------------------------------------- layers

def conv(x, weight, bias=None):
    """Stride-1 cross-correlation with zero "same" padding; ``bias`` is optional."""
    _check_5d(x, "conv")
    if weight.value.shape[1] != x.shape[1]:
        raise ShapeError(
            f"conv: input has {x.shape[1]} channels, weights expect {weight.value.shape[1]}")
    k = backend.kernels
    b = bias.value if bias is not None else np.zeros(weight.value.shape[0], weight.value.dtype)
    out = k.conv3d_forward(x.value, weight.value, b)
    w_shape = weight.value.shape

    def back(g):
        gx = k.conv3d_grad_input(g, weight.value) if x.requires_grad else None
        gw = k.conv3d_grad_weight(x.value, g, w_shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3, 4)) if bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Node(out, parents, back, "conv")


def instance_norm(x, gain, shift, eps=1e-5):
    _check_5d(x, "instance_norm")
    v = x.value
    axes = (2, 3, 4)
    m = v[0, 0].size
    mean = v.mean(axis=axes, keepdims=True)
    centred = v - mean
    var = np.mean(centred * centred, axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv
    gview = gain.value.reshape(1, -1, 1, 1, 1)
    out = xhat * gview + shift.value.reshape(1, -1, 1, 1, 1)

    def back(g):
        dxhat = g * gview
        s1 = dxhat.sum(axis=axes, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
        gx = (inv / m) * (m * dxhat - s1 - xhat * s2)
        ggain = (g * xhat).sum(axis=(0,) + axes)
        gshift = g.sum(axis=(0,) + axes)
        return gx, ggain, gshift

    return Node(out, (x, gain, shift), back, "instance_norm")


def leaky_relu(x, slope=0.01):
    v = x.value
    mask = v >= 0
    _note_branch(mask)
    out = np.where(mask, v, v * v.dtype.type(slope))

    def back(g):
        return (np.where(mask, g, g * g.dtype.type(slope)),)

    return Node(out, (x,), back, "leaky_relu")


def max_pool(x, factors):
    _check_5d(x, "max_pool")
    factors = tuple(int(f) for f in factors)
    for axis, (d, f) in enumerate(zip(x.shape[2:], factors)):
        if d % f:
            raise ShapeError(f"max_pool: axis {'ZYX'[axis]} of size {d} not divisible by {f}")
    if factors == (1, 1, 1):
        return x
    k = backend.kernels
    out, idx = k.maxpool3d_forward(x.value, factors)
    _note_branch(idx)

    def back(g):
        return (k.maxpool3d_backward(g, idx, factors),)

    return Node(out, (x,), back, "max_pool")


def _upsample_axis(v, axis):
    # factor-2 linear interpolation, half-pixel centres, edge clamped:
    # out[2i] = .25 v[i-1] + .75 v[i], out[2i+1] = .75 v[i] + .25 v[i+1]
    n = v.shape[axis]
    lo = np.take(v, np.r_[0, np.arange(n - 1)], axis=axis)
    hi = np.take(v, np.r_[np.arange(1, n), n - 1], axis=axis)
    q, t = v.dtype.type(0.25), v.dtype.type(0.75)
    even = q * lo + t * v
    odd = t * v + q * hi
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(v.shape)
    shape[axis] = 2 * n
    return out.reshape(shape)


def _upsample_axis_adjoint(g, axis):
    shape = list(g.shape)
    n = shape[axis] // 2
    shape[axis:axis + 1] = [n, 2]
    g = np.moveaxis(g.reshape(shape), (axis, axis + 1), (0, 1))
    even, odd = g[:, 0], g[:, 1]
    q, t = g.dtype.type(0.25), g.dtype.type(0.75)
    out = t * (even + odd)
    # even[i] also feeds v[i-1], odd[i] feeds v[i+1]; both clamp at the edges
    out[:-1] += q * even[1:]
    out[0] += q * even[0]
    out[1:] += q * odd[:-1]
    out[-1] += q * odd[-1]
    return np.moveaxis(out, 0, axis)


def linear_upsample(x, factors):
    _check_5d(x, "linear_upsample")
    factors = tuple(int(f) for f in factors)
    if any(f not in (1, 2) for f in factors):
        raise ShapeError(f"linear_upsample: factors must be 1 or 2, got {factors}")
    axes = [2 + a for a, f in enumerate(factors) if f == 2]
    if not axes:
        return x
    out = x.value
    for axis in axes:
        out = _upsample_axis(out, axis)

    def back(g):
        for axis in reversed(axes):
            g = _upsample_axis_adjoint(g, axis)
        return (np.ascontiguousarray(g),)

    return Node(np.ascontiguousarray(out), (x,), back, "linear_upsample")


def concat(inputs):
    inputs = list(inputs)
    if len(inputs) == 1:
        return inputs[0]
    ref = inputs[0].shape
    for node in inputs[1:]:
        if node.shape[:1] != ref[:1] or node.shape[2:] != ref[2:]:
            raise ShapeError(f"concat: shape {node.shape} incompatible with {ref}")
    out = np.concatenate([n.value for n in inputs], axis=1)
    bounds = np.cumsum([0] + [n.shape[1] for n in inputs])

    def back(g):
        return tuple(np.ascontiguousarray(g[:, a:b]) for a, b in zip(bounds[:-1], bounds[1:]))

    return Node(out, inputs, back, "concat")


def abs_diff(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"abs_diff: shapes differ {a.shape} vs {b.shape}")
    d = a.value - b.value
    sign = np.sign(d)
    _note_branch(sign)

    def back(g):
        ga = g * sign
        return ga, -ga

    return Node(np.abs(d), (a, b), back, "abs_diff")


def softmax_channels(x):
    v = x.value
    e = np.exp(v - v.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return Node(s, (x,), back, "softmax")


def channel(x, k):
    """Select channel ``k`` as an ``(N, Z, Y, X)`` node."""
    out = np.ascontiguousarray(x.value[:, k])

    def back(g):
        full = np.zeros_like(x.value)
        full[:, k] = g
        return (full,)

    return Node(out, (x,), back, "channel")


def weighted_sum(nodes, weights):
    """Scalar combination of scalar nodes, used for the deep-supervision total."""
    nodes = list(nodes)
    weights = [float(w) for w in weights]
    out = sum(w * n.value for w, n in zip(weights, nodes))
    out = np.asarray(out, dtype=nodes[0].dtype)

    def back(g):
        return tuple((np.asarray(w * g, dtype=n.dtype)) for w, n in zip(weights, nodes))

    return Node(out, nodes, back, "weighted_sum")
