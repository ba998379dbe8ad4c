"""Learnable octave convolution (LOC) block.

A residual block whose first ``h`` channels stay at full resolution (the
high-frequency branch) while the remaining ``c - h`` are processed at half
resolution. Both convolutions of the block slice their kernels out of
ordinary ``[c, c, k, k]`` kernels, so the parameter count does not depend
on the split and ``a = 1`` reproduces a plain residual block exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor

GRAD_MODES = ("hard", "ste", "relaxed")


def hi_channels(a, c):
    """Number of high-frequency channels for split ratio ``a``."""
    return min(max(int(math.floor(float(a) * c)), 1), c)


@dataclass
class LocBlockParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def channels(self):
        return self.w1.shape[0]

    @property
    def kernel(self):
        return self.w1.shape[2]

    def tensors(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def slices(self, h):
        """The six split kernels for ``h`` high channels, as Tensor views."""
        w1, w2 = self.w1, self.w2
        return {
            "W1_HH": w1[:h, :h], "W1_LH": w1[:h, h:], "W1_HL": w1[h:, :h], "W1_LL": w1[h:, h:],
            "W2_HH": w2[:, :h], "W2_LH": w2[:, h:],
        }


def init_block(c, k=3, rng=None):
    rng = np.random.default_rng(rng)
    bound = 1.0 / math.sqrt(c * k * k)

    def u(*shape):
        return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)

    return LocBlockParams(u(c, c, k, k), u(c), u(c, c, k, k), u(c))


def split_input(f_in, a):
    """Split ``f_in`` into the full-res high part and the half-res low part."""
    n, c, h, w = f_in.shape
    if h % 2 or w % 2:
        raise ValueError(f"LOC split needs even spatial dims, got {f_in.shape}")
    hc = hi_channels(a, c)
    f_h = f_in[:, :hc]
    if hc == c:
        return f_h, None
    return f_h, nx.downsample2_bilinear(f_in[:, hc:])


def _forward_split(f_in, p, hc):
    c = p.channels
    w1, b1, w2, b2 = p.w1, p.b1, p.w2, p.b2
    f_h = f_in[:, :hc]
    if hc == c:
        o_h = nx.relu(nx.conv2d(f_h, w1, b1))
        return f_in + nx.relu(nx.conv2d(o_h, w2, b2))
    f_l = nx.downsample2_bilinear(f_in[:, hc:])
    o_h = nx.relu(nx.conv2d(f_h, w1[:hc, :hc], b1[:hc])
                  + nx.upsample2_bilinear(nx.conv2d(f_l, w1[:hc, hc:])))
    o_l = nx.relu(nx.conv2d(f_l, w1[hc:, hc:], b1[hc:])
                  + nx.conv2d(nx.avg_pool2(f_h), w1[hc:, :hc]))
    merged = nx.conv2d(o_h, w2[:, :hc], b2) + nx.upsample2_bilinear(nx.conv2d(o_l, w2[:, hc:]))
    return f_in + nx.relu(merged)


def _boundary(a_val, c):
    """Lower end ``h0`` of the relaxation segment containing ``a*c``."""
    return min(max(int(math.floor(a_val * c)), 1), c - 1)


def loc_forward(f_in, params, a, grad_mode="ste"):
    """LOC block forward pass for a batch sharing one split ratio.

    ``a`` may be a float or a scalar Tensor. In ``ste`` mode the hard split
    is used forward and the gradient reaching ``a`` is ``c`` times the
    directional change between the two splits bracketing ``a*c``
    (see :func:`loc_backward_a`). ``relaxed`` interpolates those two
    splits in the forward pass itself and is intended for verification.
    """
    if grad_mode not in GRAD_MODES:
        raise ValueError(f"unknown grad_mode {grad_mode!r}")
    if f_in.shape[1] != params.channels:
        raise ValueError(f"LOC block expects {params.channels} channels, got {f_in.shape}")
    if f_in.shape[2] % 2 or f_in.shape[3] % 2:
        raise ValueError(f"LOC block needs even spatial dims, got {f_in.shape}")
    a_t = a if isinstance(a, Tensor) else None
    a_val = float(a.data) if a_t is not None else float(a)
    c = params.channels
    if grad_mode == "relaxed" and a_t is not None and c > 1:
        h0 = _boundary(a_val, c)
        lo = _forward_split(f_in, params, h0)
        hi = _forward_split(f_in, params, h0 + 1)
        frac = a_t * float(c) - float(h0)
        return lo + frac * (hi - lo)
    out = _forward_split(f_in, params, hi_channels(a_val, c))
    if grad_mode == "ste" and a_t is not None and a_t.requires_grad and c > 1 and nx._grad_enabled():
        return _attach_ste(out, a_t, f_in, params, a_val)
    return out


def _attach_ste(out, a_t, f_in, params, a_val):
    def backward(g):
        return g, np.asarray(loc_backward_a(g, f_in, params, a_val, "ste"))

    return Tensor._make(out.data, (out, a_t), backward)


def loc_backward_a(upstream, f_in, params, a, grad_mode="ste"):
    """d(loss)/d(a) for one LOC block given the gradient at its output.

    Channel ``i`` of the high branch carries gate ``clamp(a*c - i, 0, 1)``;
    only the boundary channel ``h0`` is fractional, so the relaxed output is
    ``out(h0) + (a*c - h0) * (out(h0+1) - out(h0))`` and its slope is
    ``c * (out(h0+1) - out(h0))``.
    """
    if grad_mode == "hard" or params.channels < 2:
        return 0.0
    c = params.channels
    a_val = float(a.data) if isinstance(a, Tensor) else float(a)
    h0 = _boundary(a_val, c)
    x = f_in if not isinstance(f_in, Tensor) else Tensor(f_in.data)
    with nx.no_grad():
        lo = _forward_split(x, params, h0).data
        hi = _forward_split(x, params, h0 + 1).data
    return float(c * np.sum(np.asarray(upstream) * (hi - lo)))


def residual_block(f_in, params):
    """Plain two-conv residual block sharing the LOC parameter layout."""
    o = nx.relu(nx.conv2d(f_in, params.w1, params.b1))
    return f_in + nx.relu(nx.conv2d(o, params.w2, params.b2))
