"""Minimal reverse-mode autodiff over dense numpy arrays.

Tensors are recorded onto the active :class:`Graph` (define-by-run). When no
graph is active, ops run without recording, which is what inference wants.

    with Graph() as g:
        y = conv2d(x, w, b, stride=1)
        loss = sum_all(y)
    g.backward(loss)
"""
from __future__ import annotations

import os
import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self._node is None:
            raise GraphError("tensor was not produced by a recorded graph")
        self._node.graph.backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; only what the model code actually uses
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full((), x, dtype=dtype))


class _Node:
    __slots__ = ("graph", "out", "inputs", "backward_fn", "op")

    def __init__(self, graph, out, inputs, backward_fn, op):
        self.graph = graph
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.op = op


_state = threading.local()


def current_graph():
    return getattr(_state, "graph", None)


class Graph:
    """Tape of recorded operations in execution order."""

    def __init__(self):
        self.nodes = []
        self._prev = None

    def __enter__(self):
        self._prev = current_graph()
        _state.graph = self
        return self

    def __exit__(self, *exc):
        _state.graph = self._prev
        return False

    def record(self, out, inputs, backward_fn, op):
        node = _Node(self, out, inputs, backward_fn, op)
        out._node = node
        out.requires_grad = True
        self.nodes.append(node)
        return out

    def backward(self, loss):
        if loss.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
        node = loss._node
        if node is None or node.graph is not self:
            raise GraphError("loss was not produced by this graph")

        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    gi = _unbroadcast(gi, t.shape)
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if t._node is None:
                    # leaf: accumulate now, it has no node to wait for
                    _accumulate(t, grads.pop(key))
            # intermediates keep their grad for inspection
            if node.out.requires_grad:
                _accumulate(node.out, g)

    def __len__(self):
        return len(self.nodes)


def _accumulate(t, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _wants_grad(*tensors):
    return current_graph() is not None and any(
        t is not None and t.requires_grad for t in tensors
    )


def _result(data, inputs, backward_fn, op):
    out = Tensor(data)
    if _wants_grad(*inputs):
        current_graph().record(out, inputs, backward_fn, op)
    return out


@contextmanager
def no_grad():
    prev = current_graph()
    _state.graph = None
    try:
        yield
    finally:
        _state.graph = prev


# --------------------------------------------------------------------------
# threading

_num_threads = None


def set_num_threads(n):
    """Cap the BLAS threads used by the convolution/matmul kernels."""
    global _num_threads
    from threadpoolctl import threadpool_limits

    _num_threads = n
    threadpool_limits(limits=n)


def threads_from_env():
    value = os.environ.get("AGGNET_THREADS")
    if value:
        n = int(value)
        if n < 1:
            raise ValueError(f"AGGNET_THREADS must be >= 1, got {n}")
        set_num_threads(n)


# --------------------------------------------------------------------------
# convolution kernels


def same_padding(k):
    return (k - 1) // 2


def _im2col(x, k, stride, pad):
    """(n,c,h,w) -> cols (n, ho*wo, c*k*k) plus output spatial dims."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * k * k)
    return cols, ho, wo


def _col2im(cols, x_shape, k, stride, pad):
    """Adjoint of _im2col: scatter-add columns back into an (n,c,h,w) array."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    cols = cols.reshape(n, ho, wo, c, k, k)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if pad:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return out


def _conv_forward(x, w, stride, pad):
    c_out, c_in, k, _ = w.shape
    cols, ho, wo = _im2col(x, k, stride, pad)
    out = cols @ w.reshape(c_out, -1).T  # (n, ho*wo, c_out)
    return out.transpose(0, 2, 1).reshape(x.shape[0], c_out, ho, wo), cols


def _conv_input_grad(g, w, x_shape, stride, pad):
    c_out, c_in, k, _ = w.shape
    n = g.shape[0]
    g2 = g.reshape(n, c_out, -1).transpose(0, 2, 1)  # (n, ho*wo, c_out)
    dcols = g2 @ w.reshape(c_out, -1)
    return _col2im(dcols, x_shape, k, stride, pad)


def _conv_weight_grad(g, cols, w_shape):
    c_out = w_shape[0]
    n = g.shape[0]
    g2 = g.reshape(n, c_out, -1)  # (n, c_out, ho*wo)
    dw = np.einsum("nop,npq->oq", g2, cols, optimize=True)
    return dw.reshape(w_shape)


def _check_conv(x, weight, c_in_axis, stride, name):
    if x.data.ndim != 4:
        raise ShapeError(f"{name}: input must be 4-D (n,c,h,w), got shape {x.shape}")
    if weight.data.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"{name}: weight must be (.,.,k,k), got {weight.shape}")
    if x.shape[1] != weight.shape[c_in_axis]:
        raise ShapeError(
            f"{name}: input has {x.shape[1]} channels but weight expects "
            f"{weight.shape[c_in_axis]} (weight shape {weight.shape})"
        )
    if stride not in (1, 2):
        raise ShapeError(f"{name}: stride must be 1 or 2, got {stride}")


def conv2d(x, weight, bias=None, stride=1, padding=None):
    """Same-padded 2-D convolution; weight is (c_out, c_in, k, k).

    Output spatial size is ceil(h / stride).
    """
    _check_conv(x, weight, 1, stride, "conv2d")
    k = weight.shape[2]
    pad = same_padding(k) if padding is None else padding
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({weight.shape[0]},)")
    out, cols = _conv_forward(x.data, weight.data, stride, pad)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    x_shape = x.shape
    w = weight.data

    def backward(g):
        gx = _conv_input_grad(g, w, x_shape, stride, pad) if x.requires_grad else None
        gw = _conv_weight_grad(g, cols, w.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _result(out, inputs, backward, "conv2d")


def deconv2d(x, weight, bias=None, stride=2):
    """Transposed convolution mapping (h, w) to (stride*h, stride*w).

    weight is (c_in, c_out, k, k); it is exactly the adjoint of ``conv2d``
    applied with the same weight array to a (stride*h, stride*w) input.
    """
    _check_conv(x, weight, 0, stride, "deconv2d")
    k = weight.shape[2]
    pad = same_padding(k)
    out_pad = stride + 2 * pad - k
    if not 0 <= out_pad < stride:
        raise ShapeError(f"deconv2d: kernel {k} cannot produce stride-{stride} upsampling")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"deconv2d: bias shape {bias.shape} != ({weight.shape[1]},)")
    n, _, h, w_ = x.shape
    c_out = weight.shape[1]
    out_shape = (n, c_out, stride * h, stride * w_)
    w = weight.data
    out = _conv_input_grad(x.data, w, out_shape, stride, pad)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        # forward of the underlying conv is the input gradient here
        gx = None
        cols = None
        if x.requires_grad or weight.requires_grad:
            conv_out, cols = _conv_forward(g, w, stride, pad)
            gx = conv_out if x.requires_grad else None
        gw = _conv_weight_grad(x.data, cols, w.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _result(out, inputs, backward, "deconv2d")


def fully_connected(x, weight, bias=None):
    """out = x @ weight.T + bias for x of shape (rows, L) and weight (M, L)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"fully_connected: expected 2-D operands, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"fully_connected: input width {x.shape[1]} != weight width {weight.shape[1]}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"fully_connected: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    xd, wd = x.data, weight.data

    def backward(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _result(out, inputs, backward, "fully_connected")


# --------------------------------------------------------------------------
# elementwise and shape ops


def _same_shape(a, b, op):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x, c):
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def concat_channels(tensors):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat_channels: empty list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.data.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: {t.shape} incompatible with {ref}")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=1)

    def backward(g):
        return tuple(np.split(g, splits, axis=1))

    return _result(out, tuple(tensors), backward, "concat_channels")


def reshape(x, shape):
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def relu(x):
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x, slope=0.2):
    mask = x.data > 0
    out = np.where(mask, x.data, slope * x.data).astype(x.dtype)
    return _result(out, (x,), lambda g: (np.where(mask, g, slope * g),), "leaky_relu")


def clamp_min(x, floor):
    """max(x, floor); gradient flows only where x > floor."""
    mask = x.data > floor
    out = np.maximum(x.data, x.dtype.type(floor))  # NaN propagates
    return _result(out, (x,), lambda g: (g * mask,), "clamp_min")


def where(mask, a, b):
    """Select ``a`` where mask is true, else ``b``; mask is a constant array."""
    _same_shape(a, b, "where")
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)

    def backward(g):
        return np.where(mask, g, 0).astype(g.dtype), np.where(mask, 0, g).astype(g.dtype)

    return _result(out, (a, b), backward, "where")


def abs_diff(a, b):
    _same_shape(a, b, "abs_diff")
    d = a.data - b.data
    sign = np.sign(d)
    return _result(np.abs(d), (a, b), lambda g: (g * sign, -g * sign), "abs_diff")


def huber_elem(a, b, delta=1.0):
    """Elementwise Huber of (a - b); the corner |e| == delta uses the quadratic slope."""
    _same_shape(a, b, "huber_elem")
    e = a.data - b.data
    ae = np.abs(e)
    quad = ae <= delta
    out = np.where(quad, 0.5 * e * e, delta * (ae - 0.5 * delta))
    de = np.where(quad, e, delta * np.sign(e))

    return _result(out, (a, b), lambda g: (g * de, -g * de), "huber_elem")


def diff(x, axis):
    """Forward difference x[i+1] - x[i] along ``axis``; output is one shorter."""
    ax = axis % x.data.ndim
    n = x.shape[ax]
    out = np.diff(x.data, axis=ax)

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        hi = [slice(None)] * x.data.ndim
        lo = [slice(None)] * x.data.ndim
        hi[ax] = slice(1, n)
        lo[ax] = slice(0, n - 1)
        gx[tuple(hi)] += g
        gx[tuple(lo)] -= g
        return (gx,)

    return _result(out, (x,), backward, "diff")


def sum_all(x):
    shape = x.shape
    return _result(
        np.asarray(x.data.sum(), dtype=x.dtype),
        (x,),
        lambda g: (np.broadcast_to(g, shape).astype(g.dtype),),
        "sum",
    )


def mean_all(x):
    return scale(sum_all(x), 1.0 / x.size)


# --------------------------------------------------------------------------
# batch normalization

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batch_norm(x, gamma, beta, running_mean, running_var, training=True,
               eps=BN_EPS, momentum=BN_MOMENTUM):
    """Per-channel batch norm over (n, h, w).

    running_mean / running_var are plain arrays updated in place in training
    mode (running variance uses the unbiased batch estimate).
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm: input must be 4-D, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must be ({c},)")
    xd = x.data
    if training:
        count = xd.shape[0] * xd.shape[2] * xd.shape[3]
        if count < 2:
            raise ShapeError("batch_norm: training mode needs at least 2 values per channel")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mu, var = running_mean, running_var
        count = None
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(1, c, 1, 1).astype(xd.dtype)) * inv_std.reshape(1, c, 1, 1)
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)
    gd = gamma.data

    def backward(g):
        dbeta = g.sum(axis=(0, 2, 3))
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            dxhat = g * gd.reshape(1, c, 1, 1)
            if training:
                m1 = dxhat.mean(axis=(0, 2, 3), keepdims=True)
                m2 = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                gx = (dxhat - m1 - xhat * m2) * inv_std.reshape(1, c, 1, 1)
            else:
                gx = dxhat * inv_std.reshape(1, c, 1, 1)
        return gx, dgamma, dbeta

    return _result(out, (x, gamma, beta), backward, "batch_norm")


# --------------------------------------------------------------------------
# finite-difference checking


def rel_error(analytic, numeric):
    """Max-norm relative error: max|a - n| / max(max|a|, max|n|)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / denom)


def numeric_grad(fn, t, h=1e-5, indices=None):
    """Central differences of scalar ``fn()`` w.r.t. entries of ``t.data``."""
    flat = t.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = np.zeros(flat.size)
    with no_grad():
        for i in indices:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            out[i] = (fp - fm) / (2 * h)
    return out.reshape(t.shape)


def gradcheck(fn, tensors, h=1e-5, max_entries=None, rng=None):
    """Compare analytic and central-difference gradients of scalar ``fn()``.

    ``tensors`` maps names to leaf tensors (requires_grad=True). When
    ``max_entries`` is given, at most that many randomly chosen entries per
    tensor are compared. Returns {name: max-norm relative error}.
    """
    for t in tensors.values():
        t.grad = None
    with Graph() as g:
        loss = fn()
    g.backward(loss)
    errors = {}
    for name, t in tensors.items():
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        idx = None
        if max_entries is not None and t.size > max_entries:
            rng = rng or np.random.default_rng(0)
            idx = np.sort(rng.choice(t.size, size=max_entries, replace=False))
        num = numeric_grad(fn, t, h=h, indices=idx)
        if idx is not None:
            errors[name] = rel_error(analytic.reshape(-1)[idx], num.reshape(-1)[idx])
        else:
            errors[name] = rel_error(analytic, num)
    return errors
