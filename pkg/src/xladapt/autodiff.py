"""Reverse-mode automatic differentiation on a dynamic tape.

All values are dense float64 numpy arrays. Operations record nodes onto the
currently active :class:`Tape` (a Wengert list); backward traversal walks the
list in reverse execution order, which is always a valid reverse topological
order. Backward functions are themselves written with taped primitives, so
differentiating through a gradient (``create_graph=True``) works without any
special casing -- this is what makes the exact second-order meta-update
testable.

Kernels are plain numpy and fully deterministic: two forward passes over
identical inputs are bitwise identical.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

# Log-domain "zero". A finite stand-in for -inf keeps exp()/max() free of nans.
LOG_ZERO = -1.0e30


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""


def _shape_error(op, *shapes):
    return ShapeError(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


# ---------------------------------------------------------------------------
# Tape machinery
# ---------------------------------------------------------------------------

_TAPE_STACK = []
_GRAD_ENABLED = [True]


class Node:
    __slots__ = ("out", "inputs", "bwd", "idx")

    def __init__(self, out, inputs, bwd, idx):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd
        self.idx = idx


class Tape:
    """Ordered record of executed operations; context manager activates it."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        self.clear()
        return False

    def clear(self):
        self.nodes.clear()


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@contextmanager
def no_grad():
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def grad_enabled():
    return _GRAD_ENABLED[-1]


def _record(out, inputs, bwd):
    tape = _active_tape()
    if tape is None:
        out._node = None
        return
    node = Node(out, inputs, bwd, len(tape.nodes))
    tape.nodes.append(node)
    out._node = node


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """Dense float64 array with optional gradient participation."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar -------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape):
    return Tensor(np.zeros(shape))


def _track(*tensors):
    return grad_enabled() and any(t.requires_grad for t in tensors)


# ---------------------------------------------------------------------------
# Broadcasting helpers
# ---------------------------------------------------------------------------


def _sum_to(g, shape):
    """Reduce a broadcast gradient back to ``shape`` (taped)."""
    if g.shape == tuple(shape):
        return g
    extra = len(g.shape) - len(shape)
    axes = list(range(extra))
    for i, dim in enumerate(shape):
        if dim == 1 and g.shape[extra + i] != 1:
            axes.append(extra + i)
    out = tsum(g, axis=tuple(axes), keepdims=True) if axes else g
    return reshape(out, shape)


def _binary(op_name, a, b, fwd, bwd_a, bwd_b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = fwd(a.data, b.data)
    except ValueError:
        raise _shape_error(op_name, a.shape, b.shape) from None
    out = Tensor(data, requires_grad=_track(a, b))
    if out.requires_grad:

        def bwd(g):
            ga = _sum_to(bwd_a(g, a, b, out), a.shape) if a.requires_grad else None
            gb = _sum_to(bwd_b(g, a, b, out), b.shape) if b.requires_grad else None
            return ga, gb

        _record(out, (a, b), bwd)
    return out


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def add(a, b):
    return _binary("add", a, b, np.add,
                   lambda g, a, b, o: g,
                   lambda g, a, b, o: g)


def sub(a, b):
    return _binary("sub", a, b, np.subtract,
                   lambda g, a, b, o: g,
                   lambda g, a, b, o: neg(g))


def mul(a, b):
    return _binary("mul", a, b, np.multiply,
                   lambda g, a, b, o: mul(g, b),
                   lambda g, a, b, o: mul(g, a))


def div(a, b):
    return _binary("div", a, b, np.divide,
                   lambda g, a, b, o: div(g, b),
                   lambda g, a, b, o: neg(mul(g, div(o, b))))


def neg(a):
    a = as_tensor(a)
    out = Tensor(-a.data, requires_grad=_track(a))
    if out.requires_grad:
        _record(out, (a,), lambda g: (neg(g),))
    return out


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    out = Tensor(a.data @ b.data, requires_grad=_track(a, b))
    if out.requires_grad:

        def bwd(g):
            ga = matmul(g, transpose(b)) if a.requires_grad else None
            gb = matmul(transpose(a), g) if b.requires_grad else None
            return ga, gb

        _record(out, (a, b), bwd)
    return out


def transpose(a):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise _shape_error("transpose", a.shape)
    out = Tensor(a.data.T.copy(), requires_grad=_track(a))
    if out.requires_grad:
        _record(out, (a,), lambda g: (transpose(g),))
    return out


def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape), requires_grad=_track(a))
    if out.requires_grad:
        old = a.shape
        _record(out, (a,), lambda g: (reshape(g, old),))
    return out


def broadcast_to(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    out = Tensor(np.broadcast_to(a.data, shape).copy(), requires_grad=_track(a))
    if out.requires_grad:
        old = a.shape
        _record(out, (a,), lambda g: (_sum_to(g, old),))
    return out


def exp(a):
    a = as_tensor(a)
    out = Tensor(np.exp(a.data), requires_grad=_track(a))
    if out.requires_grad:
        _record(out, (a,), lambda g: (mul(g, out),))
    return out


def log(a):
    a = as_tensor(a)
    out = Tensor(np.log(a.data), requires_grad=_track(a))
    if out.requires_grad:
        _record(out, (a,), lambda g: (div(g, a),))
    return out


def sqrt(a):
    a = as_tensor(a)
    out = Tensor(np.sqrt(a.data), requires_grad=_track(a))
    if out.requires_grad:
        _record(out, (a,), lambda g: (div(mul(g, 0.5), out),))
    return out


def relu(a):
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0), requires_grad=_track(a))
    if out.requires_grad:
        mask = Tensor((a.data > 0).astype(np.float64))
        _record(out, (a,), lambda g: (mul(g, mask),))
    return out


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims),
                 requires_grad=_track(a))
    if out.requires_grad:
        in_shape = a.shape

        def bwd(g):
            if axis is None:
                gk = reshape(g, (1,) * len(in_shape))
            elif not keepdims:
                axes = axis if isinstance(axis, tuple) else (axis,)
                axes = tuple(ax % len(in_shape) for ax in axes)
                kshape = tuple(1 if i in axes else d for i, d in enumerate(in_shape))
                gk = reshape(g, kshape)
            else:
                gk = g
            return (broadcast_to(gk, in_shape),)

        _record(out, (a,), bwd)
    return out


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.size if axis is None else (
        math.prod(a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def take_rows(a, idx):
    """Gather rows along axis 0; backward scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.data[idx], requires_grad=_track(a))
    if out.requires_grad:
        n = a.shape[0]
        _record(out, (a,), lambda g: (scatter_rows(g, idx, n),))
    return out


def scatter_rows(g, idx, n_rows):
    g = as_tensor(g)
    idx = np.asarray(idx, dtype=np.int64)
    data = np.zeros((n_rows,) + g.shape[1:])
    np.add.at(data, idx, g.data)
    out = Tensor(data, requires_grad=_track(g))
    if out.requires_grad:
        _record(out, (g,), lambda gg: (take_rows(gg, idx),))
    return out


def embedding_lookup(table, ids):
    return take_rows(table, ids)


def slice_axis(a, axis, start, stop):
    a = as_tensor(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, stop)
    out = Tensor(a.data[tuple(sl)].copy(), requires_grad=_track(a))
    if out.requires_grad:
        before = start
        after = a.shape[axis] - min(stop, a.shape[axis])
        _record(out, (a,), lambda g: (pad_axis(g, axis, before, after),))
    return out


def pad_axis(a, axis, before, after):
    a = as_tensor(a)
    pads = [(0, 0)] * a.data.ndim
    pads[axis] = (before, after)
    out = Tensor(np.pad(a.data, pads), requires_grad=_track(a))
    if out.requires_grad:
        start, stop = before, before + a.shape[axis]
        _record(out, (a,), lambda g: (slice_axis(g, axis, start, stop),))
    return out


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 requires_grad=_track(*tensors))
    if out.requires_grad:
        sizes = [t.shape[axis] for t in tensors]

        def bwd(g):
            grads, start = [], 0
            for t, s in zip(tensors, sizes):
                grads.append(slice_axis(g, axis, start, start + s)
                             if t.requires_grad else None)
                start += s
            return tuple(grads)

        _record(out, tuple(tensors), bwd)
    return out


# ---------------------------------------------------------------------------
# Composites
# ---------------------------------------------------------------------------


def _stable_shift(a, axis):
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return sub(a, Tensor(m))


def softmax(a, axis=-1):
    e = exp(_stable_shift(as_tensor(a), axis))
    return div(e, tsum(e, axis=axis, keepdims=True))


def log_softmax(a, axis=-1):
    s = _stable_shift(as_tensor(a), axis)
    return sub(s, log(tsum(exp(s), axis=axis, keepdims=True)))


def logsumexp(a, axis=-1, keepdims=False):
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m) & (m > LOG_ZERO / 2), m, 0.0)
    s = log(add(tsum(exp(sub(a, Tensor(m))), axis=axis, keepdims=True), 1e-300))
    out = add(s, Tensor(m))
    if not keepdims:
        shape = list(out.shape)
        del shape[axis % len(shape)]
        out = reshape(out, shape)
    return out


def logaddexp(a, b):
    """Pairwise log-domain add; safe when either side is ``LOG_ZERO``."""
    a, b = as_tensor(a), as_tensor(b)
    m = np.maximum(a.data, b.data)
    m = np.where(m > LOG_ZERO / 2, m, 0.0)
    mt = Tensor(m)
    return add(log(add(add(exp(sub(a, mt)), exp(sub(b, mt))), 1e-300)), mt)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then affine rescale."""
    if eps <= 0:
        raise ValueError("layer_norm: epsilon must be > 0")
    x = as_tensor(x)
    mu = mean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = mean(mul(xc, xc), axis=-1, keepdims=True)
    normed = div(xc, sqrt(add(var, eps)))
    return add(mul(normed, gamma), beta)


# ---------------------------------------------------------------------------
# Backward drivers
# ---------------------------------------------------------------------------


def _traverse(output, wanted_ids, create_graph):
    tape = _active_tape()
    if tape is None or output._node is None:
        return {}
    snapshot = tape.nodes[: output._node.idx + 1]
    gmap = {id(output): Tensor(np.ones(output.shape))}
    results = {}
    ctx = no_grad() if not create_graph else _nullctx()
    with ctx:
        for node in reversed(snapshot):
            g = gmap.pop(id(node.out), None)
            if g is None:
                continue
            if id(node.out) in wanted_ids:
                results[id(node.out)] = g
            for inp, gi in zip(node.inputs, node.bwd(g)):
                if gi is None or not inp.requires_grad:
                    continue
                k = id(inp)
                gmap[k] = add(gmap[k], gi) if k in gmap else gi
    # whatever is left was never produced by a visited node: leaves
    results.update(gmap)
    return results


@contextmanager
def _nullctx():
    yield


def grad(output, inputs, create_graph=False):
    """Gradients of a scalar ``output`` w.r.t. ``inputs``.

    With ``create_graph=True`` the returned tensors are themselves recorded on
    the tape and can be differentiated again.
    """
    if output.size != 1:
        raise ValueError("grad: output must be scalar")
    wanted = {id(t) for t in inputs}
    results = _traverse(output, wanted, create_graph)
    return [results.get(id(t), zeros(t.shape)) for t in inputs]


def backward(output):
    """Accumulate d(output)/d(leaf) into ``.grad`` of every reachable leaf."""
    if output.size != 1:
        raise ValueError("backward: output must be scalar")
    results = _traverse(output, set(), create_graph=False)
    tape = _active_tape()
    leaves = {}
    if tape is not None and output._node is not None:
        for node in tape.nodes[: output._node.idx + 1]:
            for inp in node.inputs:
                if inp._node is None and inp.requires_grad:
                    leaves[id(inp)] = inp
    for tid, g in results.items():
        leaf = leaves.get(tid)
        if leaf is None:
            continue
        if leaf.grad is None:
            leaf.grad = g.data.copy()
        else:
            leaf.grad = leaf.grad + g.data


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


def grad_check(f, params, step=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` is a zero-argument closure producing a scalar Tensor; ``params`` is
    either a list of leaf Tensors or an object exposing
    ``trainable_tensors()``. Central differences use ``step`` per coordinate.
    """
    if not (0.0 < step <= 1e-2):
        raise ValueError("grad_check: step must lie in (0, 1e-2]")
    tensors = list(params.trainable_tensors()) if hasattr(params, "trainable_tensors") \
        else list(params)
    with Tape():
        loss = f()
        if not np.isfinite(loss.data).all():
            raise FloatingPointError("grad_check: non-finite loss")
        analytic = [g.data.copy() for g in grad(loss, tensors)]

    worst = 0.0
    with no_grad():
        for t, ga in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                lp = f().item()
                flat[i] = orig - step
                lm = f().item()
                flat[i] = orig
                if not (np.isfinite(lp) and np.isfinite(lm)):
                    raise FloatingPointError("grad_check: non-finite perturbed loss")
                num = (lp - lm) / (2.0 * step)
                rel = abs(gflat[i] - num) / (abs(num) + 1e-8)
                worst = max(worst, rel)
    return worst
