"""Dense float64 tensors with reverse-mode differentiation.

Only the operations the super-resolution networks need are provided:
stride-1 same-padded convolution, 2x pooling and bilinear resizing,
dense layers, a handful of activations and elementwise arithmetic.
Forward-only resamplers (bicubic / bilinear at arbitrary scale) live here
too, since the degradation pipeline and the global skip path use them.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_local = threading.local()


def _grad_enabled():
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction on the current thread."""
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class FlopCounter:
    """Accumulates operation counts from instrumented ops.

    Conv and dense layers count a multiply and an add per MAC, bilinear
    resampling 7 per output element, 2x2 average pooling 4 per output and
    global average pooling 1 per input element. Activations, elementwise
    arithmetic and pixel shuffles are free.
    """

    BILINEAR = 7
    AVG_POOL = 4

    def __init__(self):
        self.total = 0
        self.by_op = {}

    def add(self, op, n):
        self.total += int(n)
        self.by_op[op] = self.by_op.get(op, 0) + int(n)


@contextlib.contextmanager
def count_flops():
    counter = FlopCounter()
    prev = getattr(_local, "counter", None)
    _local.counter = counter
    try:
        yield counter
    finally:
        _local.counter = prev


def _count(op, n):
    counter = getattr(_local, "counter", None)
    if counter is not None:
        counter.add(op, n)


class Tensor:
    """N-d float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    # -- graph plumbing ---------------------------------------------------
    @staticmethod
    def _make(data, parents, backward):
        out = Tensor(data)
        if _grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            if not np.isfinite(self.data).all():
                raise ValueError("backward() on a non-finite loss")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def abs(self):
        return tabs(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._make(a.data + b.data, (a, b), backward)


def neg(a):
    return Tensor._make(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._make(a.data * b.data, (a, b), backward)


def reciprocal(a):
    out = 1.0 / a.data
    return Tensor._make(out, (a,), lambda g: (-g * out * out,))


def tsum(a):
    return Tensor._make(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def tmean(a):
    n = a.data.size
    return Tensor._make(a.data.mean(), (a,), lambda g: (np.full(a.shape, float(g) / n),))


def tabs(a):
    # sign() gives the 0 subgradient at ties
    return Tensor._make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sqrt(a):
    out = np.sqrt(a.data)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / out, 0.0)
        return (g * d,)

    return Tensor._make(out, (a,), backward)


def l2_norm(a):
    """Euclidean norm over all entries; gradient 0 at the origin."""
    return sqrt(tsum(mul(a, a)))


def reshape(a, shape):
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, idx):
    def backward(g):
        out = np.zeros(a.shape)
        np.add.at(out, idx, g) if _fancy(idx) else out.__setitem__(idx, g)
        return (out,)

    return Tensor._make(a.data[idx], (a,), backward)


def _fancy(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


# -- activations ----------------------------------------------------------
def relu(x):
    mask = x.data > 0
    return Tensor._make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x, slope=0.2):
    mask = x.data > 0
    scale = np.where(mask, 1.0, slope)
    return Tensor._make(x.data * scale, (x,), lambda g: (g * scale,))


def sigmoid(x):
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return Tensor._make(out, (x,), lambda g: (g * out * (1.0 - out),))


# -- layers ---------------------------------------------------------------
def conv2d(x, weight, bias=None, padding=None):
    """Stride-1 cross-correlation of an NCHW batch with an OIkk kernel."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape} and {weight.shape}")
    n, c_in, h, w = x.shape
    c_out, wc_in, k, k2 = weight.shape
    if wc_in != c_in:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} vs kernel {weight.shape}")
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d needs a square odd kernel, got {weight.shape}")
    pad = (k - 1) // 2 if padding is None else padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    ho, wo = xp.shape[2] - k + 1, xp.shape[3] - k + 1
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))  # n, c, ho, wo, k, k
    out = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
    _count("conv2d", 2 * n * c_out * c_in * k * k * ho * wo)

    def backward(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3])) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + ho, j:j + wo] += np.tensordot(
                        weight.data[:, :, i, j], g, axes=([0], [1])).transpose(1, 0, 2, 3)
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward)


def dense(x, weight, bias=None):
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"dense shape mismatch: input {x.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
    _count("dense", 2 * x.shape[0] * weight.shape[0] * weight.shape[1])

    def backward(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward)


def _check_even(x, op):
    if x.ndim != 4:
        raise ValueError(f"{op} expects NCHW input, got {x.shape}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"{op} needs even spatial dims, got {x.shape}")


def _pool2(x):
    n, c, h, w = x.shape
    v = x.reshape(n, c, h // 2, 2, w // 2, 2)
    # fixed summation order
    return ((v[:, :, :, 0, :, 0] + v[:, :, :, 0, :, 1]) + (v[:, :, :, 1, :, 0] + v[:, :, :, 1, :, 1])) * 0.25


def _unpool2(g):
    return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25


def avg_pool2(x):
    """Non-overlapping 2x2 mean."""
    _check_even(x, "avg_pool2")
    out = _pool2(x.data)
    _count("avg_pool2", FlopCounter.AVG_POOL * out.size)
    return Tensor._make(out, (x,), lambda g: (_unpool2(g),))


def downsample2_bilinear(x):
    """Half-resolution bilinear resize with half-pixel centers.

    At an exact factor of two every output sample sits midway between a
    2x2 group of inputs, so the result equals the 2x2 mean.
    """
    _check_even(x, "downsample2_bilinear")
    out = _pool2(x.data)
    _count("bilinear", FlopCounter.BILINEAR * out.size)
    return Tensor._make(out, (x,), lambda g: (_unpool2(g),))


def _up2_axis(a, axis):
    # output 2i samples at i - 1/4, 2i+1 at i + 1/4 (edge clamped)
    n = a.shape[axis]
    prev = np.take(a, np.clip(np.arange(n) - 1, 0, n - 1), axis=axis)
    nxt = np.take(a, np.clip(np.arange(n) + 1, 0, n - 1), axis=axis)
    even = 0.75 * a + 0.25 * prev
    odd = 0.75 * a + 0.25 * nxt
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(a.shape)
    shape[axis] = 2 * n
    return out.reshape(shape)


def _up2_axis_T(g, axis):
    n = g.shape[axis] // 2
    shape = list(g.shape)
    shape[axis:axis + 1] = [n, 2]
    g = g.reshape(shape)
    even = np.take(g, 0, axis=axis + 1)
    odd = np.take(g, 1, axis=axis + 1)
    out = 0.75 * (even + odd)
    idx_prev = np.clip(np.arange(n) - 1, 0, n - 1)
    idx_next = np.clip(np.arange(n) + 1, 0, n - 1)
    moved_out = np.moveaxis(out, axis, 0)
    np.add.at(moved_out, idx_prev, 0.25 * np.moveaxis(even, axis, 0))
    np.add.at(moved_out, idx_next, 0.25 * np.moveaxis(odd, axis, 0))
    return out


def upsample2_bilinear(x):
    """2x bilinear upsampling, align_corners=False."""
    if x.ndim != 4:
        raise ValueError(f"upsample2_bilinear expects NCHW input, got {x.shape}")
    out = _up2_axis(_up2_axis(x.data, 2), 3)
    _count("bilinear", FlopCounter.BILINEAR * out.size)
    return Tensor._make(out, (x,), lambda g: (_up2_axis_T(_up2_axis_T(g, 3), 2),))


def global_avg_pool(x):
    n, c, h, w = x.shape
    out = x.data.reshape(n, c, h * w).sum(axis=2) / (h * w)
    _count("global_avg_pool", x.data.size)
    return Tensor._make(out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),))


def pixel_shuffle(x, r):
    """Depth-to-space: (N, C*r*r, H, W) -> (N, C, H*r, W*r)."""
    n, crr, h, w = x.shape
    if crr % (r * r):
        raise ValueError(f"pixel_shuffle: {crr} channels not divisible by {r * r}")
    c = crr // (r * r)
    out = x.data.reshape(n, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h * r, w * r)

    def backward(g):
        return (g.reshape(n, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(x.shape),)

    return Tensor._make(out, (x,), backward)


# -- forward-only resamplers ----------------------------------------------
def _cubic(t, a=-0.5):
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    return np.where(t <= 1, (a + 2) * t3 - (a + 3) * t2 + 1,
                    np.where(t < 2, a * t3 - 5 * a * t2 + 8 * a * t - 4 * a, 0.0))


def _resize_matrix(n_in, n_out, kind):
    """Row-stochastic interpolation matrix (n_out, n_in), half-pixel centers, edge clamp."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    if kind == "bilinear":
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        np.add.at(m, (rows, lo), 1 - frac)
        np.add.at(m, (rows, hi), frac)
    elif kind == "bicubic":
        base = np.floor(src).astype(int)
        frac = src - base
        for off in range(-1, 3):
            idx = np.clip(base + off, 0, n_in - 1)
            np.add.at(m, (rows, idx), _cubic(off - frac))
    else:
        raise ValueError(f"unknown resize kind {kind!r}")
    return m


def _out_size(n, scale, size):
    if size is not None:
        return int(size)
    return int(round(n * scale))


def resize(image, scale=None, size=None, kind="bicubic"):
    """Separable resize of the last two axes of a numpy array or Tensor.

    Either ``scale`` (ratio) or ``size`` ((H, W)) must be given. Returns a
    plain numpy array; no gradient is recorded.
    """
    data = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    h, w = data.shape[-2:]
    if size is None:
        if scale is None or scale <= 0:
            raise ValueError(f"resize needs a positive scale, got {scale}")
        oh, ow = _out_size(h, scale, None), _out_size(w, scale, None)
    else:
        oh, ow = size
    if oh < 1 or ow < 1:
        raise ValueError(f"resize output would be {oh}x{ow}")
    if (oh, ow) == (h, w):
        return data.copy()
    mh = _resize_matrix(h, oh, kind)
    mw = _resize_matrix(w, ow, kind)
    out = np.einsum("ih,...hw,jw->...ij", mh, data, mw, optimize=True)
    if kind == "bilinear":
        _count("bilinear", FlopCounter.BILINEAR * out.size)
    return out


def resize_bicubic(image, scale=None, size=None):
    """Catmull-Rom (a=-0.5) bicubic resampling, no antialiasing."""
    return resize(image, scale=scale, size=size, kind="bicubic")


def resize_bilinear(image, scale=None, size=None):
    return resize(image, scale=scale, size=size, kind="bilinear")


# -- optimizer ------------------------------------------------------------
@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state):
    """One bias-corrected Adam update, in place on the ``params`` arrays."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params, state


class Adam:
    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = AdamState(learning_rate=lr, beta1=betas[0], beta2=betas[1], epsilon=eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state)
