"""
Reverse-mode differentiation over dense float32 arrays.

Every backward rule is written with the same differentiable operations as
the forward pass. ``grad(..., build_graph=True)`` therefore records the
backward pass as ordinary graph nodes, and a gradient can itself be
differentiated (the Grad-CAM weights of the attention loss are such a
gradient).
"""
import logging
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import GraphError, ShapeError

logger = logging.getLogger(__name__)

DTYPE = np.float32


class _GradMode:
    enabled = True


@contextmanager
def set_grad_enabled(mode):
    previous = _GradMode.enabled
    _GradMode.enabled = bool(mode)
    try:
        yield
    finally:
        _GradMode.enabled = previous


def no_grad():
    """Context manager under which operations record no graph nodes."""
    return set_grad_enabled(False)


def is_grad_enabled():
    return _GradMode.enabled


class Tensor:
    """An n-dimensional float32 array, optionally tracked by the graph."""

    __slots__ = ('data', 'requires_grad', 'node', 'name')
    # numpy defers binary operators to Tensor instead of broadcasting over it
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return detach(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ', requires_grad=True' if self.requires_grad else ''
        return f"Tensor(shape={self.shape}{flag})"


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Context:
    """Per-node storage filled by ``forward`` and read by ``backward``."""

    def __init__(self, needs_input_grad):
        self.needs_input_grad = needs_input_grad
        self.saved = ()

    def save(self, *tensors):
        self.saved = tensors


class GraphNode:
    """Records how a grad-tracking tensor was produced."""

    __slots__ = ('function', 'inputs', 'ctx', 'build_graph')

    def __init__(self, function, inputs, ctx):
        self.function = function
        self.inputs = inputs
        self.ctx = ctx
        # set once this node's backward has run with graph recording on
        self.build_graph = False

    @property
    def op(self):
        return self.function.__name__


class Function:
    """A differentiable operation.

    ``forward`` receives Tensors and returns an ndarray; ``backward``
    receives the upstream gradient as a Tensor and returns one Tensor (or
    None) per input, built from differentiable operations only.
    """

    @staticmethod
    def forward(ctx, *inputs, **attrs):
        raise NotImplementedError

    @staticmethod
    def backward(ctx, grad_output):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **attrs):
        tensors = tuple(as_tensor(x) for x in inputs)
        needs = tuple(t.requires_grad for t in tensors)
        ctx = Context(needs)
        out = Tensor(cls.forward(ctx, *tensors, **attrs))
        if _GradMode.enabled and any(needs):
            out.requires_grad = True
            out.node = GraphNode(cls, tensors, ctx)
        return out


def _sum_to(grad, shape):
    if grad.shape == tuple(shape):
        return grad
    return SumTo.apply(grad, shape=tuple(shape))


class SumTo(Function):
    """Reduce a broadcast array back to ``shape``."""

    @staticmethod
    def forward(ctx, x, shape):
        ctx.in_shape = x.shape
        ctx.shape = shape
        data = x.data
        lead = data.ndim - len(shape)
        if lead:
            data = data.sum(axis=tuple(range(lead)))
        axes = tuple(i for i, n in enumerate(shape) if n == 1 and data.shape[i] != 1)
        if axes:
            data = data.sum(axis=axes, keepdims=True)
        return data

    @staticmethod
    def backward(ctx, g):
        return (broadcast_to(g, ctx.in_shape),)


class BroadcastTo(Function):
    @staticmethod
    def forward(ctx, x, shape):
        ctx.in_shape = x.shape
        return np.broadcast_to(x.data, shape)

    @staticmethod
    def backward(ctx, g):
        return (_sum_to(g, ctx.in_shape),)


def broadcast_to(x, shape):
    x = as_tensor(x)
    if x.shape == tuple(shape):
        return x
    return BroadcastTo.apply(x, shape=tuple(shape))


class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.shapes = (a.shape, b.shape)
        return a.data + b.data

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx.shapes
        return _sum_to(g, sa), _sum_to(g, sb)


class Neg(Function):
    @staticmethod
    def forward(ctx, a):
        return -a.data

    @staticmethod
    def backward(ctx, g):
        return (neg(g),)


class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a, b)
        return a.data * b.data

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        ga = _sum_to(g * b, a.shape) if ctx.needs_input_grad[0] else None
        gb = _sum_to(g * a, b.shape) if ctx.needs_input_grad[1] else None
        return ga, gb


class Div(Function):
    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a, b)
        return a.data / b.data

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        ga = _sum_to(g / b, a.shape) if ctx.needs_input_grad[0] else None
        gb = _sum_to(neg(g * a) / (b * b), b.shape) if ctx.needs_input_grad[1] else None
        return ga, gb


class MatMul(Function):
    @staticmethod
    def forward(ctx, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul needs [n,k] @ [k,m], got {a.shape} @ {b.shape}")
        ctx.save(a, b)
        return a.data @ b.data

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        ga = g @ transpose(b) if ctx.needs_input_grad[0] else None
        gb = transpose(a) @ g if ctx.needs_input_grad[1] else None
        return ga, gb


class Transpose(Function):
    @staticmethod
    def forward(ctx, a):
        if a.ndim != 2:
            raise ShapeError(f"transpose needs a matrix, got shape {a.shape}")
        return a.data.T

    @staticmethod
    def backward(ctx, g):
        return (transpose(g),)


class Reshape(Function):
    @staticmethod
    def forward(ctx, a, shape):
        ctx.in_shape = a.shape
        try:
            return a.data.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"cannot reshape {a.shape} into {shape}") from exc

    @staticmethod
    def backward(ctx, g):
        return (reshape(g, ctx.in_shape),)


class Sum(Function):
    @staticmethod
    def forward(ctx, a, axis, keepdims):
        ctx.in_shape = a.shape
        ctx.axis = axis
        ctx.keepdims = keepdims
        return np.sum(a.data, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(ctx, g):
        shape = ctx.in_shape
        if not ctx.keepdims:
            if ctx.axis is None:
                kept = (1,) * len(shape)
            else:
                axes = ctx.axis if isinstance(ctx.axis, tuple) else (ctx.axis,)
                axes = {ax % len(shape) for ax in axes}
                kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
            g = reshape(g, kept)
        return (broadcast_to(g, shape),)


class Exp(Function):
    @staticmethod
    def forward(ctx, a):
        ctx.save(a)
        return np.exp(a.data)

    @staticmethod
    def backward(ctx, g):
        (a,) = ctx.saved
        return (g * exp(a),)


class Log(Function):
    @staticmethod
    def forward(ctx, a):
        ctx.save(a)
        return np.log(a.data)

    @staticmethod
    def backward(ctx, g):
        (a,) = ctx.saved
        return (g / a,)


class Sqrt(Function):
    @staticmethod
    def forward(ctx, a):
        ctx.save(a)
        return np.sqrt(a.data)

    @staticmethod
    def backward(ctx, g):
        (a,) = ctx.saved
        return (g / (sqrt(a) * 2.0),)


class MaximumConst(Function):
    """``max(x, c)`` for a constant ``c``; ties route no gradient to x."""

    @staticmethod
    def forward(ctx, a, value):
        ctx.mask = (a.data > value).astype(DTYPE)
        return np.maximum(a.data, DTYPE(value))

    @staticmethod
    def backward(ctx, g):
        return (g * Tensor(ctx.mask),)


class Relu(Function):
    @staticmethod
    def forward(ctx, a):
        ctx.mask = (a.data > 0).astype(DTYPE)
        return a.data * ctx.mask

    @staticmethod
    def backward(ctx, g):
        # the mask is a constant, so relu has no second derivative
        return (g * Tensor(ctx.mask),)


def add(a, b):
    return Add.apply(a, b)


def neg(a):
    return Neg.apply(a)


def sub(a, b):
    return add(a, neg(as_tensor(b)))


def mul(a, b):
    return Mul.apply(a, b)


def div(a, b):
    return Div.apply(a, b)


def matmul(a, b):
    return MatMul.apply(a, b)


def transpose(a):
    return Transpose.apply(a)


def reshape(a, shape):
    return Reshape.apply(a, shape=tuple(shape))


def sum_(a, axis=None, keepdims=False):
    if isinstance(axis, list):
        axis = tuple(axis)
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, (tuple, list)) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def exp(a):
    return Exp.apply(a)


def log(a):
    return Log.apply(a)


def sqrt(a):
    return Sqrt.apply(a)


def maximum(a, value):
    return MaximumConst.apply(a, value=float(value))


def relu(x):
    return Relu.apply(x)


def logsumexp(x, axis=-1, keepdims=False):
    """Stable log-sum-exp; the shift is a detached constant, so it is exact."""
    x = as_tensor(x)
    shift = Tensor(np.max(x.data, axis=axis, keepdims=True))
    out = log(sum_(exp(x - shift), axis=axis, keepdims=True)) + shift
    if not keepdims:
        out = reshape(out, np.squeeze(out.data, axis=axis).shape)
    return out


def dot(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot needs two vectors of equal length, got {a.shape} and {b.shape}")
    return sum_(a * b)


def l2_normalize(x, eps=1e-12, axis=-1):
    """``x / max(||x||, eps)`` along ``axis``.

    The guard is applied to the squared norm so that the zero vector has a
    finite (zero) gradient.
    """
    x = as_tensor(x)
    squared = sum_(x * x, axis=axis, keepdims=True)
    return x / sqrt(maximum(squared, eps * eps))


def detach(x):
    """Same values, no graph node: downstream gradients stop here."""
    return Tensor(as_tensor(x).data)


# Convolution kernels (numpy). The three operations below are closed under
# differentiation: each one's backward is written with the other two.

def _conv_out_size(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def _check_conv(x_shape, w_shape, stride, padding):
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise ShapeError(f"conv2d needs input [N,C,H,W] and weight [F,C,kh,kw], got {x_shape} and {w_shape}")
    if x_shape[1] != w_shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input has {x_shape[1]}, weight expects {w_shape[1]}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d needs stride >= 1 and padding >= 0, got {stride} and {padding}")
    kh, kw = w_shape[2:]
    if kh > x_shape[2] + 2 * padding or kw > x_shape[3] + 2 * padding:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than padded input {x_shape[2:]} (padding {padding})")


def _im2col(x, kh, kw, stride, padding):
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def _conv2d(x, w, stride, padding):
    f, _, kh, kw = w.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, padding)
    out = cols @ w.reshape(f, -1).T
    return out.reshape(x.shape[0], ho, wo, f).transpose(0, 3, 1, 2)


def _conv2d_input_grad(g, w, x_shape, stride, padding):
    n, c, h, wd = x_shape
    f, _, kh, kw = w.shape
    ho, wo = g.shape[2:]
    gcols = g.transpose(0, 2, 3, 1).reshape(-1, f) @ w.reshape(f, -1)
    gcols = gcols.reshape(n, ho, wo, c, kh, kw)
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[..., i, j].transpose(0, 3, 1, 2)
    return xp[:, :, padding:padding + h, padding:padding + wd]


def _conv2d_weight_grad(x, g, w_shape, stride, padding):
    f, c, kh, kw = w_shape
    cols, _, _ = _im2col(x, kh, kw, stride, padding)
    gw = g.transpose(0, 2, 3, 1).reshape(-1, f).T @ cols
    return gw.reshape(f, c, kh, kw)


class Conv2d(Function):
    @staticmethod
    def forward(ctx, x, w, stride, padding):
        _check_conv(x.shape, w.shape, stride, padding)
        ctx.save(x, w)
        ctx.stride, ctx.padding = stride, padding
        return _conv2d(x.data, w.data, stride, padding)

    @staticmethod
    def backward(ctx, g):
        x, w = ctx.saved
        s, p = ctx.stride, ctx.padding
        gx = conv2d_input_grad(g, w, x.shape, s, p) if ctx.needs_input_grad[0] else None
        gw = conv2d_weight_grad(x, g, w.shape, s, p) if ctx.needs_input_grad[1] else None
        return gx, gw


class Conv2dInputGrad(Function):
    @staticmethod
    def forward(ctx, g, w, x_shape, stride, padding):
        ctx.save(g, w)
        ctx.stride, ctx.padding = stride, padding
        return _conv2d_input_grad(g.data, w.data, x_shape, stride, padding)

    @staticmethod
    def backward(ctx, gz):
        g, w = ctx.saved
        s, p = ctx.stride, ctx.padding
        dg = conv2d(gz, w, s, p) if ctx.needs_input_grad[0] else None
        dw = conv2d_weight_grad(gz, g, w.shape, s, p) if ctx.needs_input_grad[1] else None
        return dg, dw


class Conv2dWeightGrad(Function):
    @staticmethod
    def forward(ctx, x, g, w_shape, stride, padding):
        ctx.save(x, g)
        ctx.stride, ctx.padding = stride, padding
        return _conv2d_weight_grad(x.data, g.data, w_shape, stride, padding)

    @staticmethod
    def backward(ctx, gz):
        x, g = ctx.saved
        s, p = ctx.stride, ctx.padding
        dx = conv2d_input_grad(g, gz, x.shape, s, p) if ctx.needs_input_grad[0] else None
        dg = conv2d(x, gz, s, p) if ctx.needs_input_grad[1] else None
        return dx, dg


def conv2d(input, weight, stride=1, padding=0):
    """Cross-correlation of ``input`` [N,C,H,W] with ``weight`` [F,C,kh,kw]."""
    return Conv2d.apply(input, weight, stride=int(stride), padding=int(padding))


def conv2d_input_grad(grad_output, weight, input_shape, stride, padding):
    return Conv2dInputGrad.apply(grad_output, weight, x_shape=tuple(input_shape), stride=stride, padding=padding)


def conv2d_weight_grad(input, grad_output, weight_shape, stride, padding):
    return Conv2dWeightGrad.apply(input, grad_output, w_shape=tuple(weight_shape), stride=stride, padding=padding)


def conv2d_reference(x, w, stride=1, padding=0):
    """Direct nested-loop convolution over ndarrays, the oracle for ``conv2d``."""
    x = np.asarray(x, dtype=DTYPE)
    w = np.asarray(w, dtype=DTYPE)
    _check_conv(x.shape, w.shape, stride, padding)
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho = _conv_out_size(h, kh, stride, padding)
    wo = _conv_out_size(wd, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, f, ho, wo), dtype=np.float64)
    for b in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    for u in range(kh):
                        for v in range(kw):
                            out[b, o, i, j] += np.dot(
                                xp[b, :, i * stride + u, j * stride + v].astype(np.float64),
                                w[o, :, u, v].astype(np.float64),
                            )
    return out.astype(DTYPE)


def avg_pool2d(x, kernel):
    """Mean over non-overlapping ``kernel`` x ``kernel`` windows."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ShapeError(f"avg_pool2d window {kernel} does not divide extents {h}x{w}")
    blocks = reshape(x, (n, c, h // kernel, kernel, w // kernel, kernel))
    return mean(blocks, axis=(3, 5))


def global_avg_pool(x, reduction='mean'):
    """Pool [N,C,H,W] over its spatial positions into [N,C]."""
    if reduction == 'sum':
        return sum_(x, axis=(2, 3))
    if reduction == 'mean':
        return mean(x, axis=(2, 3))
    raise ValueError(f"unknown reduction {reduction!r}")


def topological_order(output):
    """Grad-tracking tensors reachable from ``output``, output first.

    Raises GraphError if a cycle is found.
    """
    order = []
    state = {}
    stack = [(output, False)]
    while stack:
        t, expanded = stack.pop()
        key = id(t)
        if expanded:
            state[key] = 2
            order.append(t)
            continue
        if state.get(key) == 2:
            continue
        if state.get(key) == 1:
            raise GraphError("computation graph contains a cycle")
        state[key] = 1
        stack.append((t, True))
        if t.node is not None:
            for parent in reversed(t.node.inputs):
                if parent.requires_grad:
                    if state.get(id(parent)) == 1:
                        raise GraphError("computation graph contains a cycle")
                    if state.get(id(parent)) != 2:
                        stack.append((parent, False))
    order.reverse()
    return order


def grad(output, inputs, build_graph=False):
    """Return d(output)/d(input) for each input.

    With ``build_graph`` the backward pass is recorded, so the returned
    gradients are grad-tracking and can appear inside another loss.
    """
    single = isinstance(inputs, Tensor)
    inputs = [inputs] if single else list(inputs)
    if output.size != 1:
        raise GraphError(f"grad needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        raise GraphError("output does not depend on any grad-tracking tensor")
    order = topological_order(output)
    reachable = {id(t) for t in order}
    for i, t in enumerate(inputs):
        if id(t) not in reachable:
            raise GraphError(f"input {i} ({t!r}) is not in the graph of the output")

    # only propagate through tensors that lead to a requested input
    targets = {id(t) for t in inputs}
    relevant = set()
    for t in reversed(order):
        if id(t) in targets or (t.node is not None and any(id(p) in relevant for p in t.node.inputs)):
            relevant.add(id(t))

    grads = {id(output): Tensor(np.ones(output.shape, dtype=DTYPE))}
    with set_grad_enabled(build_graph):
        for t in order:
            g = grads.get(id(t))
            if g is None or t.node is None:
                continue
            node = t.node
            if not any(id(p) in relevant for p in node.inputs):
                continue
            node.build_graph = build_graph
            parent_grads = node.function.backward(node.ctx, g)
            for parent, pg in zip(node.inputs, parent_grads):
                if pg is None or not parent.requires_grad or id(parent) not in relevant:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    results = []
    for t in inputs:
        g = grads.get(id(t))
        if g is None:
            g = Tensor(np.zeros(t.shape, dtype=DTYPE))
        if build_graph and not g.requires_grad:
            g = Tensor(g.data, requires_grad=True)
        results.append(g)
    return results[0] if single else results


def sgd_step(params, grads, lr, momentum=0.0, weight_decay=0.0, buffers=None):
    """One SGD update in place on ``params``.

    ``buffers`` (a dict indexed like ``params``) carries the momentum state
    between calls. Weight decay is decoupled: ``p -= lr * wd * p`` is applied
    beside the momentum update rather than folded into the gradient.
    """
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise ShapeError(f"sgd_step got {len(params)} parameters but {len(grads)} gradients")
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if buffers is None:
        buffers = {}
    lr32 = DTYPE(lr)
    for i, (p, g) in enumerate(zip(params, grads)):
        d = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=DTYPE)
        if d.shape != p.shape:
            raise ShapeError(f"gradient {i} has shape {d.shape}, parameter has {p.shape}")
        if momentum:
            buf = buffers.get(i)
            buf = d.copy() if buf is None else DTYPE(momentum) * buf + d
            buffers[i] = buf
            d = buf
        update = p.data - lr32 * d
        if weight_decay:
            update = update - lr32 * DTYPE(weight_decay) * p.data
        p.data = update.astype(DTYPE)
    return buffers


class SGD:
    """SGD with momentum over a named parameter set."""

    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0):
        self.params = params
        self.names = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {}

    def step(self, grads):
        missing = [name for name in self.names if name not in grads]
        if missing:
            raise ShapeError(f"no gradient for parameters {missing}")
        indexed = {i: self.buffers[name] for i, name in enumerate(self.names) if name in self.buffers}
        indexed = sgd_step(
            [self.params[name] for name in self.names],
            [grads[name] for name in self.names],
            self.lr, self.momentum, self.weight_decay, indexed,
        )
        self.buffers = {self.names[i]: buf for i, buf in indexed.items()}

    def state_dict(self):
        return dict(self.buffers)

    def load_state_dict(self, buffers):
        unknown = set(buffers) - set(self.names)
        if unknown:
            raise ShapeError(f"momentum buffers for unknown parameters {sorted(unknown)}")
        self.buffers = {name: np.asarray(buf, dtype=DTYPE) for name, buf in buffers.items()}
