"""Closed-form parameter and FLOP accounting.

``flops`` counts a multiply and an add separately (2 per MAC), the same
convention as :class:`splitsr.numerics.FlopCounter`, so analytic totals can
be checked against an instrumented forward pass. ``gflops`` follows the
convention of published SR comparison tables, which count one operation
per multiply-accumulate: ``gflops = flops / 2e9``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .loc import hi_channels
from .model import U_DIM, upsample_stages
from .numerics import FlopCounter

BILINEAR = FlopCounter.BILINEAR
AVG_POOL = FlopCounter.AVG_POOL


@dataclass
class CostEntry:
    name: str
    params: int
    flops: int


@dataclass
class CostReport:
    input_size: tuple
    a_values: list
    entries: list = field(default_factory=list)

    def add(self, name, params, flops):
        self.entries.append(CostEntry(name, int(params), flops))

    @property
    def params(self):
        return sum(e.params for e in self.entries)

    @property
    def flops(self):
        return sum(e.flops for e in self.entries)

    @property
    def gflops(self):
        return self.flops / 2e9

    def component(self, prefix):
        picked = [e for e in self.entries if e.name.startswith(prefix)]
        return sum(e.params for e in picked), sum(e.flops for e in picked)

    def to_dict(self):
        return {
            "input_size": list(self.input_size),
            "a": [float(x) for x in self.a_values],
            "entries": [{"name": e.name, "params": e.params, "flops": e.flops} for e in self.entries],
            "params": self.params,
            "flops": self.flops,
            "gflops": self.gflops,
            "params_m": self.params / 1e6,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    def table(self):
        groups = {}
        for e in self.entries:
            key = e.name.split(".")[0] if not e.name.startswith("sr.block") else "sr.trunk"
            p, f = groups.get(key, (0, 0))
            groups[key] = (p + e.params, f + e.flops)
        lines = [f"{'component':<12}{'params':>12}{'GFLOPs':>12}"]
        for k, (p, f) in groups.items():
            lines.append(f"{k:<12}{p:>12,}{f / 2e9:>12.3f}")
        lines.append(f"{'total':<12}{self.params:>12,}{self.gflops:>12.3f}")
        return "\n".join(lines)


def conv_cost(c_in, c_out, k, h, w):
    """(params, flops) of a stride-1 same-padded convolution with bias."""
    return c_in * c_out * k * k + c_out, 2 * c_in * c_out * k * k * h * w


def dense_cost(d_in, d_out):
    return d_in * d_out + d_out, 2 * d_in * d_out


def _loc_flops(c, k, h, w, hc):
    hw, q = h * w, (h // 2) * (w // 2)
    lo = c - hc
    conv1 = 2 * k * k * (hc * hc * hw + (hc * lo + lo * lo + lo * hc) * q)
    conv2 = 2 * k * k * (c * hc * hw + c * lo * q)
    resample = 0
    if lo > 0:
        resample = BILINEAR * (lo * q + hc * hw + c * hw) + AVG_POOL * hc * q
    return conv1, conv2, resample


def loc_block_cost(c, k, h, w, a):
    """(params, flops) of one LOC block at split ratio ``a`` on an h x w map."""
    if h % 2 or w % 2:
        raise ValueError("LOC blocks need even spatial dims")
    conv1, conv2, resample = _loc_flops(c, k, h, w, hi_channels(a, c))
    return 2 * (c * c * k * k + c), conv1 + conv2 + resample


def model_cost(config, input_size, a=0.5):
    """CostReport for one image of ``input_size`` (H, W) through D, A and the backbone.

    ``a`` may be a scalar or a per-block sequence; it is ignored for a plain
    residual trunk.
    """
    h0, w0 = input_size
    h, w = h0 + h0 % 2, w0 + w0 % 2
    c, k, s = config.channels, config.kernel, config.blocks
    a_vals = list(np.broadcast_to(np.asarray(a, dtype=np.float64), (s,)))
    rep = CostReport((int(input_size[0]), int(input_size[1])), [float(x) for x in a_vals])
    rep.add("sr.head", *conv_cost(3, c, k, h, w))
    for i in range(s):
        if config.loc:
            rep.add(f"sr.block{i}", *loc_block_cost(c, k, h, w, a_vals[i]))
        else:
            p, f = conv_cost(c, c, k, h, w)
            rep.add(f"sr.block{i}", 2 * p, 2 * f)
    ch, cw = h, w
    for j, r in enumerate(upsample_stages(config.scale)):
        rep.add(f"sr.up{j}", *conv_cost(c, c * r * r, k, ch, cw))
        ch, cw = ch * r, cw * r
    rep.add("sr.hr", *conv_cost(c, c, k, ch, cw))
    rep.add("sr.last", *conv_cost(c, 3, k, ch, cw))
    if config.global_skip:
        rep.add("sr.skip", 0, BILINEAR * 3 * ch * cw)
    if config.predictors:
        chans = (3,) + tuple(config.d_channels)
        for j in range(len(config.d_channels)):
            rep.add(f"d.conv{j}", *conv_cost(chans[j], chans[j + 1], 3, h0, w0))
        rep.add("d.gap", 0, chans[-1] * h0 * w0)
        rep.add("d.fc", *dense_cost(chans[-1], U_DIM))
        rep.add("a.fc0", *dense_cost(U_DIM, config.a_hidden))
        rep.add("a.fc1", *dense_cost(config.a_hidden, s))
    return rep


def solve_uniform_a(config, input_size, target_gflops):
    """Uniform split ratio whose cost matches ``target_gflops``.

    Returns ``(a_continuous, a_grid)``: the first treats ``a*c`` as a real
    channel count (bisection on the smooth cost polynomial); the second is
    the grid ratio ``h/c`` whose discrete cost is nearest the target.
    """
    if not config.loc:
        raise ValueError("a plain residual trunk has no split ratio")
    base = model_cost(config, input_size, 1.0)
    c, k, s = config.channels, config.kernel, config.blocks
    h, w = input_size
    h += h % 2
    w += w % 2
    full_block = base.component("sr.block0")[1]
    rest = base.flops - s * full_block

    def smooth(a):
        conv1, conv2, resample = _loc_flops(c, k, h, w, a * c)
        if a * c >= c:
            resample = 0
        return (rest + s * (conv1 + conv2 + resample)) / 2e9

    lo, hi = 1.0 / c, 1.0
    if not smooth(lo) <= target_gflops <= smooth(hi):
        raise ValueError(f"target {target_gflops} GFLOPs outside [{smooth(lo):.2f}, {smooth(hi):.2f}]")
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if smooth(mid) < target_gflops else (lo, mid)
    grid = min(range(1, c + 1), key=lambda hc: abs(model_cost(config, input_size, hc / c).gflops - target_gflops))
    return 0.5 * (lo + hi), grid / c
