"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap float64 numpy arrays. Every primitive records a node (parents plus
a backward closure) when any input requires grad and recording is enabled.
:func:`backward` walks the recorded graph once in reverse topological order
and deposits gradients on the leaves; the graph is consumed afterwards.
"""

import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import expit

from hcpl import kernels


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class DomainError(AutodiffError, ValueError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


class GraphError(AutodiffError, RuntimeError):
    pass


class UnsupportedOpError(AutodiffError, ValueError):
    pass


_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._op is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"{op}: non-finite input")


def _make(op, data, parents, backward_fn):
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    g = g.sum(axis=tuple(range(g.ndim - len(shape)))) if g.ndim > len(shape) else g
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary_shapes(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --- elementwise ---------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    _check_finite("add", a.data, b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    _check_finite("sub", a.data, b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    _check_finite("mul", a.data, b.data)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("div", a, b)
    _check_finite("div", a.data, b.data)
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make("div", out, (a, b), bw)


def pow_const(x, p):
    """``x ** p`` for a constant real exponent.

    A non-integer exponent needs a strictly positive base.
    """
    x = as_tensor(x)
    p = float(p)
    _check_finite("pow", x.data)
    if not p.is_integer() and np.any(x.data <= 0):
        raise DomainError("pow: non-integer exponent requires a strictly positive base")
    if p < 0 and np.any(x.data == 0):
        raise DomainError("pow: zero base with negative exponent")
    out = x.data ** p

    def bw(g):
        return (g * p * x.data ** (p - 1.0),)

    return _make("pow", out, (x,), bw)


def exp(x):
    x = as_tensor(x)
    _check_finite("exp", x.data)
    out = np.exp(x.data)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("exp: overflow")

    def bw(g):
        return (g * out,)

    return _make("exp", out, (x,), bw)


def log(x):
    x = as_tensor(x)
    _check_finite("log", x.data)
    if np.any(x.data <= 0):
        raise DomainError("log: non-positive input")

    def bw(g):
        return (g / x.data,)

    return _make("log", np.log(x.data), (x,), bw)


def relu(x):
    x = as_tensor(x)
    _check_finite("relu", x.data)
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _make("relu", np.where(mask, x.data, 0.0), (x,), bw)


def sigmoid(x):
    x = as_tensor(x)
    _check_finite("sigmoid", x.data)
    out = expit(x.data)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _make("sigmoid", out, (x,), bw)


def softmax(x, axis=-1):
    x = as_tensor(x)
    _check_finite("softmax", x.data)
    z = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (x,), bw)


# --- linear algebra --------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    _check_finite("matmul", a.data, b.data)

    def bw(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make("matmul", a.data @ b.data, (a, b), bw)


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D cross-correlation, zero padding.

    ``x`` is (N, C, H, W) or (C, H, W); ``w`` is (O, C, k, k); ``b`` is (O,).
    """
    x, w = as_tensor(x), as_tensor(w)
    unbatched = x.ndim == 3
    if x.ndim not in (3, 4) or w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d: bad shapes {x.shape}, {w.shape}")
    xs = x.data[None] if unbatched else x.data
    if xs.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: {xs.shape[1]} input channels, kernel expects {w.shape[1]}")
    k = w.shape[2]
    if xs.shape[2] + 2 * padding < k or xs.shape[3] + 2 * padding < k:
        raise ShapeError("conv2d: kernel larger than padded input")
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias shape {b.shape}")
        parents.append(b)
        _check_finite("conv2d", b.data)
    _check_finite("conv2d", xs, w.data)
    p = int(padding)
    xp = np.pad(xs, ((0, 0), (0, 0), (p, p), (p, p))) if p else xs
    out = kernels.conv2d_forward(xp, w.data, stride)
    if b is not None:
        out += b.data[:, None, None]
    if unbatched:
        out = out[0]

    def bw(g):
        g4 = g[None] if unbatched else g
        gxp, gw = kernels.conv2d_backward(xp, w.data, g4, stride)
        gx = gxp[:, :, p:gxp.shape[2] - p, p:gxp.shape[3] - p] if p else gxp
        grads = [gx[0] if unbatched else gx, gw]
        if b is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make("conv2d", out, parents, bw)


# --- reductions and shape --------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _expand(g, shape, axes, keepdims):
    if not keepdims:
        for a in axes:
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def reduce_sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    _check_finite("reduce_sum", x.data)
    axes = _norm_axis(axis, x.ndim)

    def bw(g):
        return (np.array(_expand(g, x.shape, axes, keepdims)),)

    return _make("reduce_sum", x.data.sum(axis=axes, keepdims=keepdims), (x,), bw)


def reduce_mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    _check_finite("reduce_mean", x.data)
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if n == 0:
        raise ShapeError("reduce_mean: empty reduction")

    def bw(g):
        return (np.array(_expand(g, x.shape, axes, keepdims)) / n,)

    return _make("reduce_mean", x.data.mean(axis=axes, keepdims=keepdims), (x,), bw)


def reduce_max(x, axis=None, keepdims=False):
    """Maximum over ``axis``; the gradient goes to one element per group.

    Ties resolve to the lowest flat index within the reduction group.
    """
    x = as_tensor(x)
    _check_finite("reduce_max", x.data)
    axes = _norm_axis(axis, x.ndim)
    if any(x.shape[a] == 0 for a in axes):
        raise ShapeError("reduce_max: empty reduction")
    keep = [a for a in range(x.ndim) if a not in axes]
    moved = np.transpose(x.data, keep + list(axes))
    flat = moved.reshape(moved.shape[:len(keep)] + (-1,))
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    if keepdims:
        out = out.reshape([1 if a in axes else n for a, n in enumerate(x.shape)])

    def bw(g):
        g = g.reshape(idx.shape)
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gmoved = gflat.reshape(moved.shape)
        return (np.transpose(gmoved, np.argsort(keep + list(axes))),)

    return _make("reduce_max", out, (x,), bw)


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    ax = axis % ts[0].ndim
    for t in ts:
        if t.ndim != ts[0].ndim or any(
                t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ShapeError("concat: mismatched shapes")
        _check_finite("concat", t.data)
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make("concat", np.concatenate([t.data for t in ts], axis=ax), ts, bw)


def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None

    def bw(g):
        return (g.reshape(x.shape),)

    return _make("reshape", out, (x,), bw)


_OPS = {
    "add": add, "sub": sub, "mul": mul, "div": div, "pow-const": pow_const,
    "exp": exp, "log": log, "relu": relu, "matmul": matmul, "conv2d": conv2d,
    "reduce_mean": reduce_mean, "reduce_max": reduce_max, "reduce_sum": reduce_sum,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis), "reshape": reshape,
    "sigmoid": sigmoid, "softmax": softmax,
}


def primitive_forward(op_kind, inputs, **attrs):
    """Apply a primitive by name, e.g. ``primitive_forward("pow-const", [x], p=0.5)``."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise UnsupportedOpError(f"unsupported op {op_kind!r}") from None
    if op_kind == "pow-const":
        return fn(inputs[0], attrs["p"])
    return fn(*inputs, **attrs)


# --- graph ----------------------------------------------------------------------

class Graph:
    """The recorded computation behind a scalar loss, in topological order."""

    def __init__(self, loss):
        if loss._consumed:
            raise GraphError("graph already consumed by a previous backward pass")
        self.loss = loss
        self.nodes, self.leaves = self._topo(loss)

    @staticmethod
    def _topo(root):
        order, leaves, seen = [], [], set()
        stack = [(root, False)]
        while stack:
            t, done = stack.pop()
            if done:
                (order if t._op is not None else leaves).append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in reversed(t._parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order, leaves

    def backward(self):
        loss = self.loss
        if loss.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._consumed:
            raise GraphError("graph already consumed by a previous backward pass")
        if not loss.requires_grad:
            raise GraphError("loss does not depend on any tensor requiring grad")
        grads = {id(loss): np.ones_like(loss.data)}
        if loss._op is None:
            loss.grad = grads[id(loss)] if loss.grad is None else loss.grad + grads[id(loss)]
            return
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = np.asarray(pg, dtype=np.float64)
        for leaf in self.leaves:
            g = grads.get(id(leaf))
            if g is not None:
                leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        for node in self.nodes:
            node._backward = None
            node._parents = ()
            node._consumed = True


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    Graph(loss).backward()


def finite_difference_gradient(fn, x, h=1e-4):
    """Central-difference gradient of scalar ``fn`` at ``x``.

    ``fn`` is evaluated twice at the base point first; differing results mean
    it is non-deterministic and the estimate would be meaningless.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = np.array(as_tensor(x).data, dtype=np.float64)

    def f(arr):
        with no_grad():
            return float(as_tensor(fn(Tensor(arr))).data)

    if f(base) != f(base):
        raise GraphError("fn is non-deterministic at the base point")
    grad = np.empty_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += h
        xm = flat.copy()
        xm[i] -= h
        gflat[i] = (f(xp.reshape(base.shape)) - f(xm.reshape(base.shape))) / (2 * h)
    return Tensor(grad)


def relative_error(analytic, numeric, floor=1e-3):
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(getattr(analytic, "data", analytic), dtype=np.float64)
    n = np.asarray(getattr(numeric, "data", numeric), dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def gradient_check(fn, params, h=1e-4):
    """Max relative error between backward and central differences over ``params``.

    ``fn`` takes no arguments and builds a scalar from ``params`` (leaf tensors).
    """
    for p in params:
        p.grad = None
    backward(fn())
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        saved = p.data

        def probe(t, p=p):
            p.data = t.data
            return fn()

        numeric = finite_difference_gradient(probe, saved, h)
        p.data = saved
        worst = max(worst, relative_error(analytic, numeric))
    return worst
