"""Parameterized blocks: VConv, GConv, De-GConv, contextual attention,
AG-GConv and AG-SC, plus the flat binary parameter format."""
from __future__ import annotations

import struct

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

LEAKY_SLOPE = 0.2


class Module:
    """Container that discovers parameters, buffers and children by attribute."""

    training = True

    def __init__(self):
        self._params = {}
        self._buffers = {}
        self._children = {}

    def __setattr__(self, name, value):
        if not name.startswith("_"):
            if isinstance(value, Tensor) and value.requires_grad:
                self._params[name] = value
            elif isinstance(value, Module):
                self._children[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name, module):
        self._children[name] = module
        return module

    def register_buffer(self, name, array):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def state_dict(self):
        """Parameters and buffers by dotted path (arrays are live views)."""
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(self.named_buffers())
        return out

    def load_state_dict(self, state):
        own = self.state_dict()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, arr in own.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise ShapeError(f"{name}: checkpoint shape {src.shape} != model shape {arr.shape}")
            arr[...] = src

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode=True):
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)


# --------------------------------------------------------------------------
# initialization


def kaiming_uniform(rng, shape, fan_in, slope=LEAKY_SLOPE, dtype=np.float32):
    gain = np.sqrt(2.0 / (1.0 + slope**2))
    bound = gain * np.sqrt(3.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def uniform_param(rng, shape, bound, dtype=np.float32):
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def const_param(shape, value, dtype=np.float32):
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)


# --------------------------------------------------------------------------
# building blocks


class Conv(Module):
    def __init__(self, rng, c_in, c_out, k, stride=1, bias=True, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.weight = kaiming_uniform(rng, (c_out, c_in, k, k), c_in * k * k, dtype=dtype)
        if bias:
            self.bias = const_param((c_out,), 0.0, dtype)
        else:
            self.bias = None

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride)


class Deconv(Module):
    def __init__(self, rng, c_in, c_out, k, stride=2, bias=True, dtype=np.float32):
        super().__init__()
        self.stride = stride
        # fan-in of a stride-s transposed conv is c_in * k * k / s^2
        fan_in = max(1, c_in * k * k // (stride * stride))
        self.weight = kaiming_uniform(rng, (c_in, c_out, k, k), fan_in, dtype=dtype)
        if bias:
            self.bias = const_param((c_out,), 0.0, dtype)
        else:
            self.bias = None

    def __call__(self, x):
        return T.deconv2d(x, self.weight, self.bias, stride=self.stride)


class BatchNorm(Module):
    def __init__(self, channels, dtype=np.float32):
        super().__init__()
        self.gamma = const_param((channels,), 1.0, dtype)
        self.beta = const_param((channels,), 0.0, dtype)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def __call__(self, x):
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean,
                            self.running_var, training=self.training)


class FC(Module):
    def __init__(self, rng, n_in, n_out, dtype=np.float32):
        super().__init__()
        bound = 1.0 / np.sqrt(n_in)
        self.weight = uniform_param(rng, (n_out, n_in), bound, dtype)
        self.bias = uniform_param(rng, (n_out,), bound, dtype)

    def __call__(self, x):
        return T.fully_connected(x, self.weight, self.bias)


class VConv(Module):
    """conv -> batch norm -> leaky ReLU.

    The conv has no bias: batch norm would cancel it and leave it with a
    permanently zero gradient.
    """

    def __init__(self, rng, c_in, c_out, k=3, stride=1, slope=LEAKY_SLOPE, dtype=np.float32):
        super().__init__()
        self.slope = slope
        self.conv = Conv(rng, c_in, c_out, k, stride, bias=False, dtype=dtype)
        self.bn = BatchNorm(c_out, dtype)

    def __call__(self, x):
        return T.leaky_relu(self.bn(self.conv(x)), self.slope)


class VDeconv(Module):
    """Vanilla up-sampling unit: transposed conv -> batch norm -> leaky ReLU."""

    def __init__(self, rng, c_in, c_out, k=3, stride=2, slope=LEAKY_SLOPE, dtype=np.float32):
        super().__init__()
        self.slope = slope
        self.deconv = Deconv(rng, c_in, c_out, k, stride, bias=False, dtype=dtype)
        self.bn = BatchNorm(c_out, dtype)

    def __call__(self, x):
        return T.leaky_relu(self.bn(self.deconv(x)), self.slope)


class GConv(Module):
    """Gated convolution: feature path (conv, BN, leaky) times sigmoid(gate conv)."""

    def __init__(self, rng, c_in, c_out, k=3, stride=1, slope=LEAKY_SLOPE, dtype=np.float32):
        super().__init__()
        self.feature = VConv(rng, c_in, c_out, k, stride, slope, dtype)
        self.gate = Conv(rng, c_in, c_out, k, stride, bias=True, dtype=dtype)

    def gate_values(self, x):
        return T.sigmoid(self.gate(x))

    def __call__(self, x):
        return T.mul(self.feature(x), self.gate_values(x))


class DeGConv(Module):
    """Gated transposed convolution; doubles the spatial size."""

    def __init__(self, rng, c_in, c_out, k=3, stride=2, slope=LEAKY_SLOPE, dtype=np.float32):
        super().__init__()
        self.feature = VDeconv(rng, c_in, c_out, k, stride, slope, dtype)
        self.gate = Deconv(rng, c_in, c_out, k, stride, bias=True, dtype=dtype)

    def gate_values(self, x):
        return T.sigmoid(self.gate(x))

    def __call__(self, x):
        return T.mul(self.feature(x), self.gate_values(x))


class ContextualAttention(Module):
    """Shared two-layer MLP applied to every flattened channel slice.

    Each (h, w) slice of the input becomes a length-L vector, goes through
    FC(L -> r*L) + ReLU and FC(r*L -> L) + sigmoid, and is reshaped back.
    One parameter set serves all slices of all batch items.
    """

    def __init__(self, rng, length, ratio=4, dtype=np.float32):
        super().__init__()
        if length < 1 or ratio < 1:
            raise ValueError(f"need L >= 1 and r >= 1, got L={length}, r={ratio}")
        self.length = length
        self.hidden = ratio * length
        self.fc1 = FC(rng, length, self.hidden, dtype)
        self.fc2 = FC(rng, self.hidden, length, dtype)

    def __call__(self, x):
        n, c, h, w = x.shape
        if h * w != self.length:
            raise ShapeError(
                f"contextual attention built for L={self.length}, got {h}x{w}={h * w}"
            )
        f = T.reshape(x, (n * c, h * w))
        g = T.sigmoid(self.fc2(T.relu(self.fc1(f))))
        return T.reshape(g, (n, c, h, w))


class AGGConv(Module):
    """Attention-guided gated convolution (encoder fusion block).

    Maps depth features (n, C, H, W) and colour features (n, C', H/2, W/2)
    to gated depth features (n, C', H/2, W/2).
    """

    def __init__(self, rng, c_in, c_out, out_hw, k=3, ratio=4, slope=LEAKY_SLOPE,
                 dtype=np.float32):
        super().__init__()
        self.down1 = VConv(rng, c_in, c_out, k, 1, slope, dtype)
        self.down2 = VConv(rng, c_out, c_out, k, 2, slope, dtype)
        self.mix = VConv(rng, 2 * c_out, c_out, k, 1, slope, dtype)
        self.ca = ContextualAttention(rng, out_hw[0] * out_hw[1], ratio, dtype)

    def features(self, f_d):
        return self.down2(self.down1(f_d))

    def gate_values(self, f_d_down, f_c):
        if f_d_down.shape != f_c.shape:
            raise ShapeError(
                f"AG-GConv: downsampled depth {f_d_down.shape} and colour {f_c.shape} disagree"
            )
        f_all = self.mix(T.concat_channels([f_d_down, f_c]))
        return self.ca(f_all)

    def __call__(self, f_d, f_c):
        f_d_down = self.features(f_d)
        return T.mul(f_d_down, self.gate_values(f_d_down, f_c))


class AGSC(Module):
    """Attention-guided skip connection: gates a colour skip with a mask
    learned from the colour skip and the incoming decoder features."""

    def __init__(self, rng, channels, k=3, slope=LEAKY_SLOPE, dtype=np.float32):
        super().__init__()
        self.depth_proj = VConv(rng, channels, channels, 1, 1, slope, dtype)
        self.color_proj = VConv(rng, channels, channels, k, 1, slope, dtype)
        self.gate_conv = Conv(rng, 2 * channels, channels, k, 1, bias=False, dtype=dtype)
        self.gate_bn = BatchNorm(channels, dtype)
        self.gate_out = Conv(rng, channels, channels, 1, 1, bias=True, dtype=dtype)

    def gate_values(self, f_c, r_d):
        if f_c.shape != r_d.shape:
            raise ShapeError(f"AG-SC: colour skip {f_c.shape} and decoder features {r_d.shape} disagree")
        r_all = T.concat_channels([self.depth_proj(r_d), self.color_proj(f_c)])
        hidden = T.relu(self.gate_bn(self.gate_conv(r_all)))
        return T.sigmoid(self.gate_out(hidden))

    def __call__(self, f_c, r_d):
        return T.mul(f_c, self.gate_values(f_c, r_d))


# --------------------------------------------------------------------------
# serialization

MAGIC = b"AGGN"
FORMAT_VERSION = 1


def dumps_params(named_arrays):
    """Serialize {name: array} to the AGGN little-endian float32 format."""
    items = list(named_arrays.items())
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(items))]
    for name, arr in items:
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


class FormatError(ValueError):
    pass


def loads_params(buf, offset=0):
    """Parse the AGGN format; returns ({name: float32 array}, end offset)."""
    view = memoryview(buf)

    def take(n):
        nonlocal offset
        if offset + n > len(view):
            raise FormatError(f"truncated parameter blob at byte {offset}")
        chunk = view[offset : offset + n]
        offset += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise FormatError(f"bad magic at byte {offset - 4}")
    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims)
        if name in out:
            raise FormatError(f"duplicate parameter name {name!r}")
        out[name] = arr.astype(np.float32)
    return out, offset
