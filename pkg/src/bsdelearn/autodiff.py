"""Reverse-mode automatic differentiation on a flat tape of float64 tensors.

A Tape records primitive operations as Nodes in topological order; values
are plain numpy arrays. backward() runs one reverse sweep over the tape
and returns exact gradients of a scalar root for every recorded node.

First derivatives of a network with respect to its *input* are emitted as
ordinary graph nodes (see input_gradient_rows), so a loss built on top of
them stays differentiable with respect to the network parameters: the
reverse sweep then delivers the required second-order contributions
without any tape-over-tape machinery.
"""

from __future__ import annotations

import weakref

import numpy as np

from .errors import NonFiniteError, ShapeError

_LEAF_OPS = ("const", "param")


class Node:
    """One tape entry: an op, its parent node ids, and the computed value."""

    # the back-reference to the tape is weak: the tape owns its nodes, and
    # keeping the cycle strong would defer every dropped graph to the
    # cyclic collector, which shows up as large pauses in training loops
    __slots__ = ("_tape_ref", "nid", "op", "parents", "value", "ctx", "needs_grad")

    # defer mixed ndarray-node arithmetic to the reflected methods below
    __array_ufunc__ = None

    def __init__(self, tape, nid, op, parents, value, ctx=None, needs_grad=False):
        self._tape_ref = weakref.ref(tape)
        self.nid = nid
        self.op = op
        self.parents = parents
        self.value = value
        self.ctx = ctx
        self.needs_grad = needs_grad

    @property
    def tape(self):
        tape = self._tape_ref()
        if tape is None:
            raise ReferenceError("the tape owning this node no longer exists")
        return tape

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.nid}, {self.op}, shape={self.value.shape})"

    # arithmetic sugar; scalars and ndarrays are wrapped as constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_node(self.tape, other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        raise TypeError("node/node division is not a registered primitive")

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(_as_node(self.tape, other), self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def item(self):
        return float(self.value)


class Tape:
    """Single-writer record of Nodes; parents always precede children."""

    def __init__(self, check_finite=False):
        self.nodes = []
        self.parameter_ids = []
        self.check_finite = check_finite

    def _record(self, op, parents, value, ctx=None):
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite result in op '{op}'")
        nodes = self.nodes
        needs = any(nodes[p].needs_grad for p in parents)
        node = Node(self, len(nodes), op, parents, value, ctx, needs_grad=needs)
        nodes.append(node)
        return node

    def constant(self, value):
        arr = np.asarray(value, dtype=np.float64)
        return self._record("const", (), arr)

    def parameter(self, value):
        arr = np.asarray(value, dtype=np.float64)
        node = self._record("param", (), arr)
        node.needs_grad = True
        self.parameter_ids.append(node.nid)
        return node

    def __len__(self):
        return len(self.nodes)


def _as_node(tape, v):
    if isinstance(v, Node):
        if v.tape is not tape:
            raise ShapeError("operands recorded on different tapes")
        return v
    return tape.constant(v)


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a = a if isinstance(a, Node) else _as_node(b.tape, a)
    b = _as_node(a.tape, b)
    return a.tape._record("add", (a.nid, b.nid), a.value + b.value)


def sub(a, b):
    a = a if isinstance(a, Node) else _as_node(b.tape, a)
    b = _as_node(a.tape, b)
    return a.tape._record("sub", (a.nid, b.nid), a.value - b.value)


def mul(a, b):
    a = a if isinstance(a, Node) else _as_node(b.tape, a)
    b = _as_node(a.tape, b)
    return a.tape._record("mul", (a.nid, b.nid), a.value * b.value)


def scale(a, c):
    return a.tape._record("scale", (a.nid,), a.value * c, ctx=float(c))


def matmul(a, b):
    """Matrix product: 2D@2D, batched 3D@3D, or 3D@2D (shared right factor)."""
    a = a if isinstance(a, Node) else _as_node(b.tape, a)
    b = _as_node(a.tape, b)
    na, nb = a.value.ndim, b.value.ndim
    if (na, nb) not in ((2, 2), (3, 3), (3, 2)):
        raise ShapeError(f"matmul supports 2D/3D operands, got {na}D @ {nb}D")
    if a.value.shape[-1] != b.value.shape[-2]:
        raise ShapeError(f"matmul inner mismatch: {a.value.shape} @ {b.value.shape}")
    if (na, nb) == (3, 3) and a.value.shape[0] != b.value.shape[0]:
        raise ShapeError("batched matmul needs equal batch extents")
    return a.tape._record("matmul", (a.nid, b.nid), a.value @ b.value)


def affine(x, w, b):
    """Fused x @ w.T + b with w in (out, in) orientation and bias row b."""
    w = _as_node(x.tape, w)
    b = _as_node(x.tape, b)
    if x.value.shape[-1] != w.value.shape[1]:
        raise ShapeError(f"affine mismatch: {x.value.shape} with W {w.value.shape}")
    return x.tape._record("affine", (x.nid, w.nid, b.nid), x.value @ w.value.T + b.value)


def _unary(name, fn):
    def op(a):
        if not isinstance(a, Node):
            return fn(a)
        return a.tape._record(name, (a.nid,), fn(a.value))

    op.__name__ = name
    return op


tanh = _unary("tanh", np.tanh)
sin = _unary("sin", np.sin)
cos = _unary("cos", np.cos)
exp = _unary("exp", np.exp)
log = _unary("ln", np.log)
square = _unary("square", np.square)
ln = log


def sum_(a, axis=None, keepdims=False):
    if not isinstance(a, Node):
        return np.sum(a, axis=axis, keepdims=keepdims)
    value = a.value.sum(axis=axis, keepdims=keepdims)
    return a.tape._record("sum", (a.nid,), np.asarray(value), ctx=(axis, keepdims, a.value.shape))


def mean(a, axis=None, keepdims=False):
    if not isinstance(a, Node):
        return np.mean(a, axis=axis, keepdims=keepdims)
    value = a.value.mean(axis=axis, keepdims=keepdims)
    return a.tape._record("mean", (a.nid,), np.asarray(value), ctx=(axis, keepdims, a.value.shape))


def concat(nodes, axis=0):
    tape = nodes[0].tape
    nodes = [_as_node(tape, n) for n in nodes]
    value = np.concatenate([n.value for n in nodes], axis=axis)
    sizes = tuple(n.value.shape[axis] for n in nodes)
    return tape._record("concat", tuple(n.nid for n in nodes), value, ctx=(axis, sizes))


def slice_axis(a, axis, start, stop):
    index = [slice(None)] * a.value.ndim
    index[axis] = slice(start, stop)
    value = a.value[tuple(index)]
    return a.tape._record("slice", (a.nid,), value, ctx=(axis, start, stop, a.value.shape))


def transpose(a):
    """Swap the last two axes (plain transpose for 2D operands)."""
    value = np.swapaxes(a.value, -1, -2)
    return a.tape._record("transpose", (a.nid,), np.ascontiguousarray(value))


def reshape(a, shape):
    if not isinstance(a, Node):
        return np.reshape(a, shape)
    return a.tape._record("reshape", (a.nid,), a.value.reshape(shape), ctx=a.value.shape)


def row_sum(a, keepdims=True):
    """Sum over the last axis; works on nodes and arrays alike."""
    if isinstance(a, Node):
        return sum_(a, axis=a.value.ndim - 1, keepdims=keepdims)
    return np.sum(a, axis=-1, keepdims=keepdims)


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------

def _expand_reduced(g, axis, keepdims, in_shape):
    if axis is None:
        return np.broadcast_to(g, in_shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, in_shape)


def backward(tape, root):
    """Gradients of a scalar root for every node on a path to a parameter.

    Returns a dict node-id -> ndarray. Adjoints are only propagated into
    subgraphs that contain parameters (constants never receive
    gradients); parameter nodes the root does not depend on are present
    with exact zeros.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.value.shape}")
    nodes = tape.nodes
    grads = {root.nid: np.ones_like(root.value)}

    def acc(nid, g, fresh=True):
        # non-fresh contributions may alias another node's gradient buffer;
        # read-only views (no-op broadcasts) cannot take later in-place adds
        if not nodes[nid].needs_grad:
            return
        cur = grads.get(nid)
        if cur is None:
            if not fresh or not g.flags.writeable:
                g = g.copy()
            grads[nid] = g
        else:
            cur += g

    def acc_unbroadcast(nid, g, shape):
        r = _unbroadcast(g, shape)
        acc(nid, r, fresh=r is not g)

    for node in reversed(nodes[: root.nid + 1]):
        g = grads.get(node.nid)
        if g is None:
            continue
        op = node.op
        if op in _LEAF_OPS or not node.needs_grad:
            continue
        p = node.parents
        if op == "affine":
            x, w = nodes[p[0]], nodes[p[1]]
            if x.needs_grad:
                acc(p[0], g @ w.value)
            if w.needs_grad:
                acc(p[1], g.T @ x.value)
            acc(p[2], g.sum(axis=0))
        elif op == "matmul":
            a, b = nodes[p[0]], nodes[p[1]]
            av, bv = a.value, b.value
            if av.ndim == bv.ndim:
                if a.needs_grad:
                    acc(p[0], g @ np.swapaxes(bv, -1, -2))
                if b.needs_grad:
                    acc(p[1], np.swapaxes(av, -1, -2) @ g)
            else:  # 3D @ 2D
                if a.needs_grad:
                    acc(p[0], g @ bv.T)
                if b.needs_grad:
                    acc(p[1], np.einsum("rmp,rmn->pn", av, g))
        elif op == "add":
            acc_unbroadcast(p[0], g, nodes[p[0]].value.shape)
            acc_unbroadcast(p[1], g, nodes[p[1]].value.shape)
        elif op == "sub":
            acc_unbroadcast(p[0], g, nodes[p[0]].value.shape)
            acc_unbroadcast(p[1], -g, nodes[p[1]].value.shape)
        elif op == "mul":
            a, b = nodes[p[0]], nodes[p[1]]
            acc_unbroadcast(p[0], g * b.value, a.value.shape)
            acc_unbroadcast(p[1], g * a.value, b.value.shape)
        elif op == "scale":
            acc(p[0], g * node.ctx)
        elif op == "tanh":
            acc(p[0], g * (1.0 - np.square(node.value)))
        elif op == "sin":
            acc(p[0], g * np.cos(nodes[p[0]].value))
        elif op == "cos":
            acc(p[0], -g * np.sin(nodes[p[0]].value))
        elif op == "exp":
            acc(p[0], g * node.value)
        elif op == "ln":
            acc(p[0], g / nodes[p[0]].value)
        elif op == "square":
            acc(p[0], 2.0 * g * nodes[p[0]].value)
        elif op == "sum":
            axis, keepdims, in_shape = node.ctx
            acc(p[0], np.ascontiguousarray(_expand_reduced(g, axis, keepdims, in_shape)))
        elif op == "mean":
            axis, keepdims, in_shape = node.ctx
            count = np.prod(in_shape) if axis is None else in_shape[axis]
            acc(p[0], np.ascontiguousarray(_expand_reduced(g / count, axis, keepdims, in_shape)))
        elif op == "concat":
            axis, sizes = node.ctx
            offset = 0
            for pid, size in zip(p, sizes):
                index = [slice(None)] * g.ndim
                index[axis] = slice(offset, offset + size)
                acc(pid, g[tuple(index)].copy())
                offset += size
        elif op == "slice":
            axis, start, stop, in_shape = node.ctx
            full = np.zeros(in_shape)
            index = [slice(None)] * len(in_shape)
            index[axis] = slice(start, stop)
            full[tuple(index)] = g
            acc(p[0], full)
        elif op == "transpose":
            acc(p[0], np.swapaxes(g, -1, -2), fresh=False)
        elif op == "reshape":
            acc(p[0], g.reshape(node.ctx), fresh=False)
        else:  # pragma: no cover
            raise ShapeError(f"no adjoint registered for op '{op}'")

    for pid in tape.parameter_ids:
        if pid not in grads:
            grads[pid] = np.zeros_like(nodes[pid].value)
    return grads


# ---------------------------------------------------------------------------
# analytic input gradients for affine/tanh chains
# ---------------------------------------------------------------------------

def input_gradient_rows(layers, hiddens, n_rows):
    """Per-row gradient of a scalar-output affine/tanh chain w.r.t. its input.

    layers: [(W_node, b_node), ...] with W in (out, in) orientation, the
    final W of shape (1, eta). hiddens: the tanh activation nodes of each
    hidden layer, as produced by the forward pass. Returns a node of shape
    (n_rows, d_in) holding W_{L+1} diag(tanh') W_L ... diag(tanh') W_1 per
    row. Built from registered primitives only, so the result stays
    differentiable w.r.t. the layer parameters.
    """
    w_out = layers[-1][0]
    if w_out.value.shape[0] != 1:
        raise ShapeError("input gradient requires a scalar-output chain")
    g = None
    for l in range(len(hiddens), 0, -1):
        s = 1.0 - square(hiddens[l - 1])  # tanh'(z) = 1 - tanh(z)^2
        g = mul(w_out, s) if g is None else mul(g, s)
        g = matmul(g, layers[l - 1][0])
    if g is None:  # purely affine map: gradient is the constant weight row
        ones = w_out.tape.constant(np.ones((n_rows, 1)))
        g = matmul(ones, w_out)
    return g
