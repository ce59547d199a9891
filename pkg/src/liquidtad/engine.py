"""Dense-array engine with a dynamic reverse-mode tape.

Arrays are plain row-major numpy arrays.  A :class:`Tensor` wraps one; when a
:class:`Graph` is active and any input requires a gradient, every op appends a
node ``(op name, output, inputs, saved context)`` to the graph.  The backward
pass walks that list in reverse and dispatches on the op name through
:data:`BACKWARD`, so a single rule can be swapped out (the gradcheck negative
control relies on this).
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

from . import kernels

__all__ = [
    "Tensor", "Parameter", "Graph", "ShapeError", "GraphError", "NonFiniteError",
    "BACKWARD", "default_dtype", "set_default_dtype", "precision", "as_tensor",
    "add", "sub", "mul", "neg", "exp", "sigmoid", "softplus", "relu",
    "elementwise", "sum", "mean", "layer_norm", "conv1d_depthwise",
    "linear_per_timestep", "dropout", "max_pool1d", "concat_rows",
    "take_rows", "row", "stack_rows", "custom_op",
]


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class NonFiniteError(ArithmeticError):
    pass


_DTYPES = {"f32": np.float32, "f64": np.float64}
_config = {"dtype": np.float32, "check_finite": True}
_local = threading.local()


def default_dtype():
    return _config["dtype"]


def set_default_dtype(name_or_dtype):
    if isinstance(name_or_dtype, str):
        dt = _DTYPES[name_or_dtype]
    else:
        dt = np.dtype(name_or_dtype).type
        if dt not in (np.float32, np.float64):
            raise ValueError(f"unsupported precision {name_or_dtype!r}")
    _config["dtype"] = dt
    return dt


@contextlib.contextmanager
def precision(name):
    old = _config["dtype"]
    set_default_dtype(name)
    try:
        yield
    finally:
        _config["dtype"] = old


@contextlib.contextmanager
def finite_checks(enabled: bool):
    old = _config["check_finite"]
    _config["check_finite"] = enabled
    try:
        yield
    finally:
        _config["check_finite"] = old


def _active_graph():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_from_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype or default_dtype())
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._from_op = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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
        return neg(self)


class Parameter(Tensor):
    """Trainable leaf; ``grad`` always exists and matches ``data`` in shape."""

    __slots__ = ("name",)

    def __init__(self, data, name="", dtype=None):
        super().__init__(np.array(data, dtype=dtype or default_dtype()), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class Graph:
    """Ordered record of applied ops.

    Use as a context manager around the forward pass, then call
    :meth:`backward` once on a scalar output.
    """

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op, out, inputs, ctx):
        self.nodes.append((op, out, inputs, ctx))

    def backward(self, loss, visit=None):
        if self.consumed:
            raise GraphError("graph already consumed by a previous backward()")
        if loss.data.size != 1 or loss.data.ndim > 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        grads = {id(loss): np.ones_like(loss.data)}
        if not loss._from_op and loss.requires_grad:
            _accumulate_leaf(loss, grads.pop(id(loss)))
        for op, out, inputs, ctx in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if visit is not None:
                visit(op)
            if g is None:
                continue
            in_grads = BACKWARD[op](ctx, g)
            for inp, gi in zip(inputs, in_grads):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                if inp._from_op:
                    prev = grads.get(id(inp))
                    grads[id(inp)] = gi if prev is None else prev + gi
                else:
                    _accumulate_leaf(inp, gi)
        self.nodes = []


def _accumulate_leaf(t, g):
    g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad = t.grad + g


_all_finite = kernels.all_finite


def _make(op, data, inputs, ctx):
    if _config["check_finite"] and not _all_finite(data):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    req = False
    for t in inputs:
        if isinstance(t, Tensor) and t.requires_grad:
            req = True
            break
    if req:
        g = _active_graph()
        if g is not None:
            out.requires_grad = True
            out._from_op = True
            g.record(op, out, inputs, ctx)
    return out


def custom_op(name, data, inputs, ctx, backward=None):
    """Record a fused op defined outside the engine.

    ``backward(ctx, grad_out)`` must return one gradient (or None) per input.
    """
    if backward is not None:
        BACKWARD.setdefault(name, backward)
    elif name not in BACKWARD:
        raise GraphError(f"no backward rule registered for {name!r}")
    return _make(name, data, inputs, ctx)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a, b, op):
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=default_dtype())


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    ad, bd = _data(a), _data(b)
    _check_broadcast(ad, bd, "add")
    return _make("add", ad + bd, (a, b), (ad.shape, bd.shape))


def sub(a, b):
    ad, bd = _data(a), _data(b)
    _check_broadcast(ad, bd, "sub")
    return _make("sub", ad - bd, (a, b), (ad.shape, bd.shape))


def mul(a, b):
    ad, bd = _data(a), _data(b)
    _check_broadcast(ad, bd, "mul")
    return _make("mul", ad * bd, (a, b), (ad, bd))


def neg(a):
    return _make("neg", -a.data, (a,), None)


def exp(a):
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _make("exp", y, (a,), y)


def _sigmoid(x):
    # tanh form: stable on both tails and several times faster than expit
    y = np.array(x, copy=True)
    y *= 0.5
    np.tanh(y, out=y)
    y *= 0.5
    y += 0.5
    return y


def _softplus(x):
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(a):
    y = _sigmoid(a.data)
    return _make("sigmoid", y, (a,), y)


def softplus(a):
    return _make("softplus", _softplus(a.data), (a,), a.data)


def relu(a):
    return _make("relu", np.maximum(a.data, 0), (a,), a.data > 0)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "sigmoid": sigmoid,
                "softplus": softplus, "exp": exp, "neg": neg, "relu": relu}


def elementwise(kind, *inputs):
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*inputs)


# ---------------------------------------------------------------------------
# reductions


def sum(a):  # noqa: A001 - mirrors numpy naming
    return _make("sum", np.asarray(a.data.sum(), dtype=a.dtype), (a,), a.data.shape)


def mean(a):
    return _make("mean", np.asarray(a.data.mean(), dtype=a.dtype), (a,), a.data.shape)


# ---------------------------------------------------------------------------
# structured ops


def layer_norm(x, gamma, beta, eps_ln=1e-5):
    xd = x.data
    if xd.ndim != 2 or xd.shape[1] == 0:
        raise ShapeError(f"layer_norm expects T x C with C >= 1, got {xd.shape}")
    if eps_ln <= 0:
        raise ValueError("eps_ln must be positive")
    C = xd.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"layer_norm affine params must have shape ({C},)")
    y, xhat, rstd = kernels.layer_norm_forward(
        np.ascontiguousarray(xd), gamma.data, beta.data, xd.dtype.type(eps_ln))
    return _make("layer_norm", y, (x, gamma, beta), (xhat, rstd, gamma.data))


def conv1d_depthwise(x, kernel):
    xd, kd = x.data, kernel.data
    if xd.ndim != 2 or kd.ndim != 2:
        raise ShapeError("conv1d_depthwise expects x: T x C and kernel: K x C")
    K, C = kd.shape
    T = xd.shape[0]
    if xd.shape[1] != C:
        raise ShapeError(f"channel mismatch: x has {xd.shape[1]}, kernel has {C}")
    if K % 2 == 0:
        raise ShapeError(f"depthwise kernel size must be odd, got {K}")
    if K > 2 * T - 1:
        raise ShapeError(f"kernel size {K} exceeds 2T-1 = {2 * T - 1}")
    y = kernels.conv_dw_forward(np.ascontiguousarray(xd), np.ascontiguousarray(kd))
    return _make("conv1d_depthwise", y, (x, kernel), (xd, kd))


def linear_per_timestep(x, w, b):
    xd, wd, bd = x.data, w.data, b.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[0] or bd.shape != (wd.shape[1],):
        raise ShapeError(f"linear: x {xd.shape}, w {wd.shape}, b {bd.shape} do not agree")
    y = xd @ wd
    y += bd
    return _make("linear", y, (x, w, b), (xd, wd))


def dropout(x, rate, seed=None, training=True):
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    rng = np.random.default_rng(seed)
    keep = rng.random(x.data.shape) >= rate
    scale = np.where(keep, 1.0 / (1.0 - rate), 0.0).astype(x.dtype)
    return _make("dropout", x.data * scale, (x,), scale)


def max_pool1d(x, stride):
    xd = x.data
    T = xd.shape[0]
    if T % stride:
        raise ShapeError(f"max_pool1d needs T divisible by {stride}, got {T}")
    y, idx = kernels.maxpool_forward(np.ascontiguousarray(xd), stride)
    return _make("max_pool1d", y, (x,), (idx, stride, xd.shape))


def take_rows(x, start, stop):
    return _make("take_rows", x.data[start:stop], (x,), (start, stop, x.data.shape))


def row(x, t):
    return _make("row", x.data[t], (x,), (t, x.data.shape))


def concat_rows(tensors):
    data = np.concatenate([t.data for t in tensors], axis=0)
    sizes = [t.data.shape[0] for t in tensors]
    return _make("concat_rows", data, tuple(tensors), sizes)


def stack_rows(tensors):
    data = np.stack([t.data for t in tensors], axis=0)
    return _make("stack_rows", data, tuple(tensors), len(tensors))


# ---------------------------------------------------------------------------
# backward rules: rule(ctx, grad_out) -> tuple of input gradients


def _bw_add(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def _bw_sub(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(-g, sb)


def _bw_mul(ctx, g):
    a, b = ctx
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _bw_layer_norm(ctx, g):
    xhat, rstd, gamma = ctx
    return kernels.layer_norm_backward(np.ascontiguousarray(g), xhat, rstd, gamma)


def _bw_conv(ctx, g):
    xd, kd = ctx
    gx, gk = kernels.conv_dw_backward(np.ascontiguousarray(g), xd, kd)
    return gx, gk


def _bw_linear(ctx, g):
    xd, wd = ctx
    return g @ wd.T, xd.T @ g, g.sum(axis=0)


def _bw_maxpool(ctx, g):
    idx, s, shape = ctx
    n, C = g.shape
    gx = np.zeros(shape, dtype=g.dtype)
    rows = np.arange(n)[:, None] * s + idx
    gx[rows, np.arange(C)[None, :]] = g
    return (gx,)


def _bw_take_rows(ctx, g):
    start, stop, shape = ctx
    gx = np.zeros(shape, dtype=g.dtype)
    gx[start:stop] = g
    return (gx,)


def _bw_row(ctx, g):
    t, shape = ctx
    gx = np.zeros(shape, dtype=g.dtype)
    gx[t] = g
    return (gx,)


def _bw_concat(sizes, g):
    out = []
    o = 0
    for n in sizes:
        out.append(g[o:o + n])
        o += n
    return tuple(out)


def _bw_softplus(x, g):
    return (g * _sigmoid(x),)


BACKWARD = {
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "neg": lambda ctx, g: (-g,),
    "exp": lambda y, g: (g * y,),
    "sigmoid": lambda y, g: (g * y * (1.0 - y),),
    "softplus": _bw_softplus,
    "relu": lambda m, g: (g * m,),
    "sum": lambda shape, g: (np.broadcast_to(g, shape).copy(),),
    "mean": lambda shape, g: (np.full(shape, g / np.prod(shape), dtype=g.dtype),),
    "layer_norm": _bw_layer_norm,
    "conv1d_depthwise": _bw_conv,
    "linear": _bw_linear,
    "dropout": lambda scale, g: (g * scale,),
    "max_pool1d": _bw_maxpool,
    "take_rows": _bw_take_rows,
    "row": _bw_row,
    "concat_rows": _bw_concat,
    "stack_rows": lambda n, g: tuple(g[i] for i in range(n)),
}
