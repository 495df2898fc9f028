"""Minimal reverse-mode automatic differentiation on numpy buffers.

Supports exactly the operations needed by the three networks: 3D
convolution and its transpose, dense layers, PReLU, sigmoid, channel
concatenation, elementwise arithmetic and reductions.  The graph is
define-by-run: every op records its parents and a backward closure on the
output tensor, and ``backward`` replays the reachable subgraph in exact
reverse recording order.
"""

from __future__ import annotations

import itertools
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class FrozenParamsError(RuntimeError):
    """Attempted optimizer step on a frozen parameter collection."""


class MissingGradError(RuntimeError):
    """Optimizer step requested before backward populated gradients."""


# When True every forward op asserts its output is finite (slow; meant for
# debugging and the test suite).
CHECK_FINITE = False

_ids = itertools.count()


class Tensor:
    """N-dimensional array with optional participation in the gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_tid")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._tid = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar loss")
        for node in Tape.from_root(self).reverse_nodes():
            if node is self and node.grad is None:
                node.grad = np.ones_like(node.data)
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic sugar used by the losses module
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, Tensor(np.asarray(-1.0, dtype=self.dtype)))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class Tape:
    """Recording-order view of the ops reachable from a root tensor.

    Tensors carry their own backward closures; the tape materializes the
    reachable subgraph sorted by creation id, which equals the recording
    order of a define-by-run forward pass.
    """

    def __init__(self, nodes):
        self.nodes = nodes  # ascending creation order

    @classmethod
    def from_root(cls, root):
        seen = set()
        nodes = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._tid)
        return cls(nodes)

    def reverse_nodes(self):
        return reversed(self.nodes)


def _make(data, parents, backward):
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values in forward op output")
    out = Tensor(data)
    grad_parents = tuple(p for p in parents if p.requires_grad or p._backward is not None)
    if grad_parents:
        out.requires_grad = True
        out._parents = grad_parents
        out._backward = backward
    return out


def _reduce_to(g, shape):
    # undo scalar/implicit broadcasting in elementwise ops
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops and reductions


def add(a, b):
    def backward(g):
        if a.requires_grad or a._backward:
            a._accum(_reduce_to(g, a.shape))
        if b.requires_grad or b._backward:
            b._accum(_reduce_to(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    def backward(g):
        if a.requires_grad or a._backward:
            a._accum(_reduce_to(g, a.shape))
        if b.requires_grad or b._backward:
            b._accum(_reduce_to(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    def backward(g):
        if a.requires_grad or a._backward:
            a._accum(_reduce_to(g * b.data, a.shape))
        if b.requires_grad or b._backward:
            b._accum(_reduce_to(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a, b):
    def backward(g):
        if a.requires_grad or a._backward:
            a._accum(_reduce_to(g / b.data, a.shape))
        if b.requires_grad or b._backward:
            b._accum(_reduce_to(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), backward)


def square(a):
    def backward(g):
        a._accum(g * (2.0 * a.data))

    return _make(a.data * a.data, (a,), backward)


def sqrt(a):
    out_data = np.sqrt(a.data)

    def backward(g):
        a._accum(g * (0.5 / out_data))

    return _make(out_data, (a,), backward)


def log(a):
    def backward(g):
        a._accum(g / a.data)

    return _make(np.log(a.data), (a,), backward)


def clamp(a, lo, hi):
    # gradient passes through only where the value was not clipped
    inside = (a.data > lo) & (a.data < hi)

    def backward(g):
        a._accum(g * inside)

    return _make(np.clip(a.data, lo, hi), (a,), backward)


def tsum(a):
    def backward(g):
        a._accum(np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))

    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward)


def tmean(a):
    n = a.data.size

    def backward(g):
        a._accum(np.broadcast_to(g / n, a.shape).astype(a.dtype, copy=False))

    return _make(np.asarray(a.data.mean(), dtype=a.dtype), (a,), backward)


def dot(a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"dot: shapes {a.shape} vs {b.shape}")
    return tsum(mul(a, b))


def sigmoid(a):
    e = np.exp(-np.abs(a.data))
    out_data = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(
        a.dtype, copy=False)

    def backward(g):
        a._accum(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def prelu(a, slope):
    """Channelwise parametric ReLU; channel axis is 1 for rank >= 2."""
    c_axis = 1 if a.data.ndim >= 2 else 0
    c = a.data.shape[c_axis]
    if slope.data.shape != (c,):
        raise ShapeError(f"prelu: slope shape {slope.shape} vs {c} channels")
    bshape = [1] * a.data.ndim
    bshape[c_axis] = c
    s = slope.data.reshape(bshape)
    pos = a.data > 0

    def backward(g):
        if a.requires_grad or a._backward:
            a._accum(g * np.where(pos, 1.0, s))
        if slope.requires_grad or slope._backward:
            contrib = g * np.where(pos, 0.0, a.data)
            axes = tuple(i for i in range(a.data.ndim) if i != c_axis)
            slope._accum(contrib.sum(axis=axes))

    return _make(np.where(pos, a.data, s * a.data), (a, slope), backward)


def reshape(a, shape):
    def backward(g):
        a._accum(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def batch_slice(a, start, stop):
    """Slice along axis 0; gradient scatters back into the full range."""

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[start:stop] = g
        a._accum(full)

    return _make(a.data[start:stop], (a,), backward)


def concat_channels(tensors):
    """Concatenate along axis 1, preserving order."""
    if not tensors:
        raise ShapeError("concat_channels: empty input list")
    sizes = [t.data.shape[1] for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=1)

    def backward(g):
        off = 0
        for t, c in zip(tensors, sizes):
            if t.requires_grad or t._backward:
                t._accum(g[:, off:off + c])
            off += c

    return _make(data, tuple(tensors), backward)


def dense(x, w, b):
    """x: (N, K), w: (K, M), b: (M,) -> (N, M)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"dense: x {x.shape} incompatible with w {w.shape}")
    if b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"dense: bias {b.shape} vs {w.data.shape[1]} outputs")

    def backward(g):
        if x.requires_grad or x._backward:
            x._accum(g @ w.data.T)
        if w.requires_grad or w._backward:
            w._accum(x.data.T @ g)
        if b.requires_grad or b._backward:
            b._accum(g.sum(axis=0))

    return _make(x.data @ w.data + b.data, (x, w, b), backward)


# ---------------------------------------------------------------------------
# 3D convolution


def _check_conv_args(k, stride, padding):
    if k < 1 or stride < 1:
        raise ShapeError(f"conv3d: kernel {k} and stride {stride} must be >= 1")
    if padding < 0:
        raise ShapeError(f"conv3d: padding {padding} must be >= 0")


def _windows(xp, k, stride):
    # xp: (N, C, D, H, W) already padded -> (N, C, D', H', W', k, k, k)
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    return win[:, :, ::stride, ::stride, ::stride]


def _conv_out_dim(d, k, stride, padding):
    return (d + 2 * padding - k) // stride + 1


def conv3d(x, w, b, stride=1, padding=0):
    """x: (N, C, D, H, W), w: (F, C, k, k, k), b: (F,) -> (N, F, D', H', W')."""
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeError(f"conv3d: need 5D input/weight, got {x.shape} / {w.shape}")
    n, c, d, h, wd = x.data.shape
    f, cw, k, k2, k3 = w.data.shape
    if not (k == k2 == k3):
        raise ShapeError(f"conv3d: kernel must be cubic, got {w.shape}")
    _check_conv_args(k, stride, padding)
    if cw != c:
        raise ShapeError(f"conv3d: input has {c} channels, weight expects {cw}")
    if b.data.shape != (f,):
        raise ShapeError(f"conv3d: bias {b.shape} vs {f} filters")
    if min(d, h, wd) + 2 * padding < k:
        raise ShapeError(f"conv3d: spatial dims {(d, h, wd)} + 2*{padding} pad < kernel {k}")

    pad = [(0, 0), (0, 0)] + [(padding, padding)] * 3
    xp = np.pad(x.data, pad) if padding else x.data
    win = _windows(xp, k, stride)
    out = np.einsum("ncdhwijk,fcijk->nfdhw", win, w.data, optimize=True)
    out += b.data.reshape(1, f, 1, 1, 1)

    def backward(g):
        if w.requires_grad or w._backward:
            w._accum(np.einsum("nfdhw,ncdhwijk->fcijk", g, win, optimize=True))
        if b.requires_grad or b._backward:
            b._accum(g.sum(axis=(0, 2, 3, 4)))
        if x.requires_grad or x._backward:
            x._accum(_conv3d_input_grad(g, w.data, xp.shape, stride, padding))

    return _make(out.astype(x.dtype, copy=False), (x, w, b), backward)


def _conv3d_input_grad(g, wdata, padded_shape, stride, padding):
    # scatter-add each kernel offset's contribution back onto the padded input
    f, c, k = wdata.shape[0], wdata.shape[1], wdata.shape[2]
    dp, hp, wp = g.shape[2], g.shape[3], g.shape[4]
    gxp = np.zeros(padded_shape, dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                contrib = np.einsum("nfdhw,fc->ncdhw", g, wdata[:, :, i, j, l], optimize=True)
                gxp[:, :,
                    i:i + stride * dp:stride,
                    j:j + stride * hp:stride,
                    l:l + stride * wp:stride] += contrib
    if padding:
        gxp = gxp[:, :, padding:-padding, padding:-padding, padding:-padding]
    return gxp


def conv3d_transpose(x, w, b, stride=1):
    """x: (N, F, d, h, w), w: (F, C, k, k, k), b: (C,) -> (N, C, D, H, W).

    Exact adjoint of conv3d with padding 0 and the same weight:
    output spatial dim = (d - 1) * stride + k.
    """
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeError(f"conv3d_transpose: need 5D input/weight, got {x.shape} / {w.shape}")
    n, f, d, h, wd = x.data.shape
    fw, c, k, k2, k3 = w.data.shape
    if not (k == k2 == k3):
        raise ShapeError(f"conv3d_transpose: kernel must be cubic, got {w.shape}")
    _check_conv_args(k, stride, 0)
    if fw != f:
        raise ShapeError(f"conv3d_transpose: input has {f} channels, weight expects {fw}")
    if b.data.shape != (c,):
        raise ShapeError(f"conv3d_transpose: bias {b.shape} vs {c} output channels")

    out_shape = (n, c, (d - 1) * stride + k, (h - 1) * stride + k, (wd - 1) * stride + k)
    out = np.zeros(out_shape, dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                contrib = np.einsum("nfdhw,fc->ncdhw", x.data, w.data[:, :, i, j, l], optimize=True)
                out[:, :,
                    i:i + stride * d:stride,
                    j:j + stride * h:stride,
                    l:l + stride * wd:stride] += contrib
    out += b.data.reshape(1, c, 1, 1, 1)

    def backward(g):
        if x.requires_grad or x._backward:
            win = _windows(g, k, stride)
            x._accum(np.einsum("ncdhwijk,fcijk->nfdhw", win, w.data, optimize=True))
        if w.requires_grad or w._backward:
            win = _windows(g, k, stride)
            w._accum(np.einsum("nfdhw,ncdhwijk->fcijk", x.data, win, optimize=True))
        if b.requires_grad or b._backward:
            b._accum(g.sum(axis=(0, 2, 3, 4)))

    return _make(out, (x, w, b), backward)


# ---------------------------------------------------------------------------
# parameter collections and optimizers


@dataclass
class ModelParams:
    """Named, ordered parameter collection with a freeze flag.

    Keys ending in ``.w`` are weights (subject to L2 regularization);
    ``.b`` biases and ``.slope`` PReLU slopes are exempt.
    """

    name: str
    entries: dict = field(default_factory=dict)
    frozen: bool = False

    def add(self, key, tensor):
        if key in self.entries:
            raise KeyError(f"duplicate parameter key {key!r} in {self.name}")
        tensor.requires_grad = True
        self.entries[key] = tensor
        return tensor

    def tensors(self):
        return list(self.entries.values())

    def zero_grad(self):
        for t in self.entries.values():
            t.grad = None

    def num_params(self):
        return sum(t.data.size for t in self.entries.values())

    def checksum(self):
        h = 0
        for key in sorted(self.entries):
            h = zlib.crc32(key.encode(), h)
            h = zlib.crc32(np.ascontiguousarray(self.entries[key].data).tobytes(), h)
        return h

    def astype(self, dtype):
        out = ModelParams(self.name, frozen=self.frozen)
        for key, t in self.entries.items():
            out.add(key, Tensor(t.data.astype(dtype)))
        return out

    def state_bytes(self):
        """Serialize to the AFCK checkpoint format (bit-exact round trip)."""
        blob = [b"AFCK", struct.pack("<HI", 1, len(self.entries))]
        for key, t in self.entries.items():
            kb = key.encode()
            blob.append(struct.pack("<I", len(kb)))
            blob.append(kb)
            blob.append(struct.pack("<I", t.data.ndim))
            blob.append(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            blob.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        return b"".join(blob)

    @classmethod
    def from_bytes(cls, raw, name="params"):
        if raw[:4] != b"AFCK":
            raise ValueError("bad checkpoint magic")
        version, count = struct.unpack_from("<HI", raw, 4)
        if version != 1:
            raise ValueError(f"unsupported checkpoint version {version}")
        off = 10
        out = cls(name)
        for _ in range(count):
            (klen,) = struct.unpack_from("<I", raw, off)
            off += 4
            key = raw[off:off + klen].decode()
            off += klen
            (rank,) = struct.unpack_from("<I", raw, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(dims)
            off += 4 * size
            out.add(key, Tensor(data.copy()))
        return out

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.state_bytes())

    @classmethod
    def load(cls, path, name=None):
        with open(path, "rb") as fh:
            raw = fh.read()
        return cls.from_bytes(raw, name=name or str(path))


def _is_weight(key):
    return key.endswith(".w")


class Optimizer:
    """SGD / Momentum / Adam with per-epoch learning-rate decay.

    ``weight_reg`` adds 2*reg*w to the gradient of every ``.w`` entry
    before the update (biases and PReLU slopes are exempt).
    """

    def __init__(self, kind, lr, weight_reg=0.0, beta=0.9, beta1=0.99, beta2=0.999,
                 epoch_decay=0.99, eps=1e-8):
        kind = kind.lower()
        if kind not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer kind {kind!r}")
        if lr <= 0:
            raise ValueError("learning_rate must be positive")
        if weight_reg < 0:
            raise ValueError("weight_reg must be non-negative")
        self.kind = kind
        self.lr = float(lr)
        self.weight_reg = float(weight_reg)
        self.beta = beta
        self.beta1 = beta1
        self.beta2 = beta2
        self.epoch_decay = epoch_decay
        self.eps = eps
        self.t = 0
        self._buffers = {}

    def decay_epoch(self):
        self.lr *= self.epoch_decay

    def _buf(self, params, key, slot):
        store = self._buffers.setdefault((params.name, key), {})
        if slot not in store:
            store[slot] = np.zeros_like(params.entries[key].data)
        return store[slot]

    def step(self, params):
        if params.frozen:
            raise FrozenParamsError(f"parameters {params.name!r} are frozen")
        self.t += 1
        for key, p in params.entries.items():
            if p.grad is None:
                raise MissingGradError(f"no gradient for {params.name}.{key}")
            g = p.grad
            if self.weight_reg and _is_weight(key):
                g = g + 2.0 * self.weight_reg * p.data
            if self.kind == "sgd":
                p.data -= self.lr * g
            elif self.kind == "momentum":
                v = self._buf(params, key, "v")
                v *= self.beta
                v += g
                p.data -= self.lr * v
            else:  # adam
                m = self._buf(params, key, "m")
                v = self._buf(params, key, "v")
                m *= self.beta1
                m += (1 - self.beta1) * g
                v *= self.beta2
                v += (1 - self.beta2) * g * g
                mhat = m / (1 - self.beta1 ** self.t)
                vhat = v / (1 - self.beta2 ** self.t)
                p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(fn, inputs, eps=1e-4):
    """Max relative error of analytic gradients vs central finite differences.

    ``fn`` maps the input tensors to a scalar Tensor; inputs must be
    float64 and flagged requires_grad.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        t.requires_grad = True
        t.grad = None
    loss = fn(*inputs)
    loss.backward()
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = fn(*inputs).item()
            flat[i] = orig - eps
            lo = fn(*inputs).item()
            flat[i] = orig
            num[i] = (hi - lo) / (2 * eps)
        num = num.reshape(t.data.shape)
        denom = np.maximum(np.abs(analytic) + np.abs(num), 1.0)
        worst = max(worst, float(np.max(np.abs(analytic - num) / denom)))
    return worst
