"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and, while recording is enabled,
remembers the primitive that produced it together with a vector-Jacobian
product.  Every VJP is itself written with taped primitives, so running the
backward pass with ``create_graph=True`` records a differentiable graph of
the gradient (needed for unrolled second-order meta-gradients).
"""

import threading
from contextlib import contextmanager

import numpy as np

from pacmeta.autodiff import kernels


class NumericFailure(FloatingPointError):
    """A forward value that should be finite is not."""


_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def recording(enabled):
    prev = grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    return recording(False)


class Tensor:
    __slots__ = ("value", "parents", "vjp", "requires_grad", "__weakref__")
    __array_priority__ = 100

    def __init__(self, value, parents=(), vjp=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad or bool(parents)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Tensor({self.value!r}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.value)

    def item(self):
        return float(self.value)

    def numpy(self):
        return self.value

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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def variable(x):
    """A leaf tensor that gradients are taken with respect to."""
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def _make(value, parents, vjp):
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(value, parents, vjp)
    return Tensor(value)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def sum_to(x, shape):
    """Sum a broadcast tensor back down to ``shape``."""
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1)
    val = x.value.sum(axis=axes, keepdims=True)
    if lead:
        val = val.reshape(val.shape[lead:])
    src = x.shape
    return _make(val.reshape(shape), (x,), lambda g: (broadcast_to(g, src),))


def broadcast_to(x, shape):
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape
    return _make(np.broadcast_to(x.value, shape).copy(), (x,),
                 lambda g: (sum_to(g, src),))


def reshape(x, shape):
    x = as_tensor(x)
    src = x.shape
    return _make(x.value.reshape(shape), (x,), lambda g: (reshape(g, src),))


def transpose(x):
    x = as_tensor(x)
    return _make(np.swapaxes(x.value, -1, -2), (x,), lambda g: (transpose(g),))


def getitem(x, idx):
    x = as_tensor(x)
    src = x.shape
    return _make(x.value[idx], (x,), lambda g: (scatter(g, idx, src),))


def scatter(g, idx, shape):
    """Zero tensor of ``shape`` with ``g`` added at ``idx`` (adjoint of indexing)."""
    g = as_tensor(g)
    out = np.zeros(shape)
    np.add.at(out, idx, g.value)
    return _make(out, (g,), lambda gg: (getitem(gg, idx),))


def concat(xs, axis=-1):
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)
    val = np.concatenate([x.value for x in xs], axis=axis)

    def vjp(g):
        out = []
        for a, b in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(a), int(b))
            out.append(getitem(g, tuple(idx)))
        return tuple(out)

    return _make(val, tuple(xs), vjp)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b),
                 lambda g: (sum_to(g, sa), sum_to(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.value - b.value, (a, b),
                 lambda g: (sum_to(g, sa), sum_to(neg(g), sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.value * b.value, (a, b),
                 lambda g: (sum_to(mul(g, b), sa), sum_to(mul(g, a), sb)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    out = a.value / b.value

    def vjp(g):
        ga = div(g, b)
        return sum_to(ga, sa), sum_to(neg(mul(ga, div(a, b))), sb)

    return _make(out, (a, b), vjp)


def neg(a):
    a = as_tensor(a)
    return _make(-a.value, (a,), lambda g: (neg(g),))


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    if p == 2.0:
        return mul(a, a)
    return _make(a.value ** p, (a,),
                 lambda g: (mul(g, mul(power(a, p - 1.0), p)),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.value)

    def vjp(g):
        return (mul(g, y),)

    y = _make(out, (a,), vjp)
    return y


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.value), (a,), lambda g: (div(g, a),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.value)

    def vjp(g):
        return (mul(g, sub(1.0, mul(y, y))),)

    y = _make(out, (a,), vjp)
    return y


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    src = a.shape
    val = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            axes = tuple(ax % len(src) for ax in axes)
            kshape = tuple(1 if i in axes else s for i, s in enumerate(src))
            g = reshape(g, kshape)
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * len(src))
        return (broadcast_to(g, src),)

    return _make(val, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    total = tsum(a, axis, keepdims)
    count = a.value.size / max(total.value.size, 1)
    return mul(total, 1.0 / count)


def logsumexp(a, axis=-1, keepdims=False):
    a = as_tensor(a)
    mx = np.max(a.value, axis=axis, keepdims=True)
    val = mx + np.log(np.sum(np.exp(a.value - mx), axis=axis, keepdims=True))
    out = val if keepdims else np.squeeze(val, axis=axis)
    src = a.shape
    lse_keep = val

    def vjp(g):
        if not keepdims:
            g = reshape(g, lse_keep.shape)
        soft = exp(sub(a, broadcast_to(reshape(y, lse_keep.shape), src)))
        return (mul(broadcast_to(g, src), soft),)

    y = _make(out, (a,), vjp)
    return y


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1:
        out = matmul(reshape(a, (1,) + a.shape), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    if b.ndim == 1:
        out = matmul(a, reshape(b, b.shape + (1,)))
        return reshape(out, out.shape[:-1])
    sa, sb = a.shape, b.shape
    return _make(a.value @ b.value, (a, b),
                 lambda g: (sum_to(matmul(g, transpose(b)), sa),
                            sum_to(matmul(transpose(a), g), sb)))


def diagonal(a):
    """Diagonal of the last two axes."""
    a = as_tensor(a)
    n = a.shape[-1]
    return _make(np.diagonal(a.value, axis1=-2, axis2=-1).copy(), (a,),
                 lambda g: (diag_embed(g, n),))


def diag_embed(d, n=None):
    d = as_tensor(d)
    n = d.shape[-1] if n is None else n
    out = d.value[..., :, None] * np.eye(n)
    return _make(out, (d,), lambda g: (diagonal(g),))


def trace(a):
    return tsum(diagonal(a), axis=-1)


def tril(a):
    a = as_tensor(a)
    mask = np.tril(np.ones(a.shape[-2:]))
    return mul(a, mask)


def solve_lower(l, b, trans=False):
    """``L^{-1} B`` (or ``L^{-T} B``) for lower-triangular ``L``."""
    l, b = as_tensor(l), as_tensor(b)
    x_val = kernels.solve_lower(l.value, b.value, trans)
    sl, sb = l.shape, b.shape

    def vjp(g):
        gb = solve_lower(l, g, not trans)
        if trans:
            gl = neg(tril(matmul(x, transpose(gb))))
        else:
            gl = neg(tril(matmul(gb, transpose(x))))
        return sum_to(gl, sl), sum_to(gb, sb)

    x = _make(x_val, (l, b), vjp)
    return x


def cholesky(a):
    """Jittered lower Cholesky factor of a symmetric matrix.

    Returns ``(L, jitter)``; ``jitter`` is a plain array with one entry per
    batch element.  The gradient treats ``jitter`` as a constant.
    """
    a = as_tensor(a)
    l_val, jitter = kernels.cholesky(a.value)
    n = a.shape[-1]
    phi = np.tril(np.ones((n, n))) - 0.5 * np.eye(n)

    def vjp(g):
        # P = Phi(L^T Lbar); Abar = sym(L^{-T} P L^{-1})
        p = mul(matmul(transpose(lf), g), phi)
        tmp = solve_lower(lf, p, trans=True)
        s = transpose(solve_lower(lf, transpose(tmp), trans=True))
        return (mul(add(s, transpose(s)), 0.5),)

    lf = _make(l_val, (a,), vjp)
    return lf, jitter


def sqdist(a, b):
    """Pairwise squared distances between the rows of ``a`` and ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        ga = mul(sub(mul(tsum(g, axis=-1, keepdims=True), a), matmul(g, b)), 2.0)
        gt = transpose(g)
        gb = mul(sub(mul(tsum(gt, axis=-1, keepdims=True), b), matmul(gt, a)), 2.0)
        return sum_to(ga, sa), sum_to(gb, sb)

    return _make(kernels.sqdist(a.value, b.value), (a, b), vjp)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

class Tape:
    """Topologically ordered record of the primitives leading to ``root``.

    Built on demand from the parent links of ``root``; replaying it in
    reverse order accumulates vector-Jacobian products.
    """

    def __init__(self, root):
        self.root = root
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order

    def __len__(self):
        return len(self.nodes)

    def backward(self, seed=None, create_graph=False):
        """Return ``{id(node): gradient Tensor}`` for every recorded node."""
        root = self.root
        if seed is None:
            seed = Tensor(np.ones_like(root.value))
        grads = {id(root): as_tensor(seed)}
        with recording(create_graph):
            for node in reversed(self.nodes):
                g = grads.get(id(node))
                if g is None or node.vjp is None:
                    continue
                for parent, pg in zip(node.parents, node.vjp(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    prev = grads.get(key)
                    grads[key] = pg if prev is None else add(prev, pg)
        return grads


def gradients(output, inputs, create_graph=False, seed=None):
    """Gradients of ``output`` w.r.t. each tensor in ``inputs``.

    Inputs the output does not depend on receive zero gradients.
    """
    single = isinstance(inputs, Tensor)
    inputs = [inputs] if single else list(inputs)
    if not output.requires_grad:
        res = [Tensor(np.zeros_like(x.value)) for x in inputs]
    else:
        grads = Tape(output).backward(seed, create_graph)
        res = []
        for x in inputs:
            g = grads.get(id(x))
            res.append(Tensor(np.zeros_like(x.value)) if g is None else g)
    return res[0] if single else res


def grad(f, at):
    """Gradient of the scalar function ``f`` at the point ``at``.

    ``f`` receives a leaf :class:`Tensor` and must return a scalar
    :class:`Tensor` (or float).  Raises :class:`NumericFailure` when the
    forward value is not finite.
    """
    x = variable(at)
    y = as_tensor(f(x))
    if y.value.size != 1:
        raise ValueError(f"f must return a scalar, got shape {y.shape}")
    if not np.all(np.isfinite(y.value)):
        raise NumericFailure(f"non-finite forward value {y.value!r}")
    return gradients(reshape(y, ()), x).value.copy()


def value_and_grad(f, at):
    x = variable(at)
    y = as_tensor(f(x))
    if not np.all(np.isfinite(y.value)):
        raise NumericFailure(f"non-finite forward value {y.value!r}")
    return float(y.value), gradients(reshape(y, ()), x).value.copy()
