"""Degradation predictor D, split predictor A and the LOC super-resolution backbone."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .loc import LocBlockParams, loc_forward, residual_block
from .numerics import Tensor

U_DIM = 33
LAYOUT_VERSION = 1
_MAGIC = b"SPLITSR1"


@dataclass
class ModelConfig:
    channels: int = 64
    blocks: int = 16
    scale: int = 4
    kernel: int = 3
    loc: bool = True  # False: plain residual trunk
    predictors: bool = True  # build D and A
    d_channels: tuple = (64, 33, 33)
    a_hidden: int = 25
    global_skip: bool = True

    def __post_init__(self):
        self.d_channels = tuple(self.d_channels)
        if self.scale not in (2, 3, 4):
            raise ValueError(f"unsupported scale {self.scale}")
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")

    def to_dict(self):
        d = asdict(self)
        d["d_channels"] = list(self.d_channels)
        return d


PRESETS = {
    "srresnet": dict(channels=64, blocks=16, scale=4, loc=False, predictors=False),
    "dcs": dict(channels=64, blocks=16, scale=4, loc=True, predictors=True),
    "desk": dict(channels=8, blocks=2, scale=2, loc=True, predictors=True),
}


def preset(name, **overrides):
    try:
        kw = dict(PRESETS[name])
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    kw.update(overrides)
    return ModelConfig(**kw)


def upsample_stages(scale):
    return [3] if scale == 3 else [2] * int(round(math.log2(scale)))


def _as_batch(x):
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return data[None] if data.ndim == 3 else data


def _pad_even(x):
    h, w = x.shape[2:]
    ph, pw = h % 2, w % 2
    if not (ph or pw):
        return x, (h, w)
    return np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect"), (h, w)


class SplitSR:
    """The three networks plus the end-to-end forward pass."""

    def __init__(self, config=None, seed=0):
        self.config = config or ModelConfig()
        self.seed = seed
        self.params = {}
        rng = np.random.default_rng(seed)
        cfg = self.config
        c, k = cfg.channels, cfg.kernel
        self._conv("sr.head", 3, c, k, rng)
        for i in range(cfg.blocks):
            self._conv(f"sr.block{i}.conv1", c, c, k, rng)
            self._conv(f"sr.block{i}.conv2", c, c, k, rng)
        for j, r in enumerate(upsample_stages(cfg.scale)):
            self._conv(f"sr.up{j}", c, c * r * r, k, rng)
        self._conv("sr.hr", c, c, k, rng)
        self._conv("sr.last", c, 3, k, rng)
        if cfg.predictors:
            chans = (3,) + cfg.d_channels
            for j in range(len(cfg.d_channels)):
                self._conv(f"d.conv{j}", chans[j], chans[j + 1], 3, rng)
            self._dense("d.fc", cfg.d_channels[-1], U_DIM, rng)
            self._dense("a.fc0", U_DIM, cfg.a_hidden, rng)
            self._dense("a.fc1", cfg.a_hidden, cfg.blocks, rng)

    def _conv(self, name, c_in, c_out, k, rng):
        bound = 1.0 / math.sqrt(c_in * k * k)
        self.params[name + ".weight"] = Tensor(rng.uniform(-bound, bound, (c_out, c_in, k, k)), True, name + ".weight")
        self.params[name + ".bias"] = Tensor(rng.uniform(-bound, bound, (c_out,)), True, name + ".bias")

    def _dense(self, name, d_in, d_out, rng):
        bound = 1.0 / math.sqrt(d_in)
        self.params[name + ".weight"] = Tensor(rng.uniform(-bound, bound, (d_out, d_in)), True, name + ".weight")
        self.params[name + ".bias"] = Tensor(rng.uniform(-bound, bound, (d_out,)), True, name + ".bias")

    def __getitem__(self, name):
        return self.params[name]

    def parameters(self, prefix=""):
        return [p for n, p in self.params.items() if n.startswith(prefix)]

    def named_parameters(self):
        return list(self.params.items())

    def num_params(self, prefix=""):
        return sum(p.data.size for p in self.parameters(prefix))

    def block(self, i):
        p = self.params
        return LocBlockParams(p[f"sr.block{i}.conv1.weight"], p[f"sr.block{i}.conv1.bias"],
                              p[f"sr.block{i}.conv2.weight"], p[f"sr.block{i}.conv2.bias"])

    def _apply_conv(self, x, name):
        return nx.conv2d(x, self.params[name + ".weight"], self.params[name + ".bias"])

    # -- networks ---------------------------------------------------------
    def predict_degradation(self, lr):
        """Predicted degradation vector, shape (N, 33)."""
        if not self.config.predictors:
            raise RuntimeError("model was built without the degradation predictor")
        x = nx.as_tensor(lr)
        n_conv = len(self.config.d_channels)
        for j in range(n_conv):
            x = self._apply_conv(x, f"d.conv{j}")
            if j < n_conv - 1:
                x = nx.leaky_relu(x, 0.2)
        x = nx.global_avg_pool(x)
        return nx.dense(x, self.params["d.fc.weight"], self.params["d.fc.bias"])

    def predict_split(self, u_hat):
        """Per-block split ratios in (0, 1), shape (N, blocks)."""
        p = self.params
        h = nx.leaky_relu(nx.dense(u_hat, p["a.fc0.weight"], p["a.fc0.bias"]), 0.2)
        return nx.sigmoid(nx.dense(h, p["a.fc1.weight"], p["a.fc1.bias"]))

    def super_resolve(self, lr, a, grad_mode="ste"):
        """Backbone forward pass.

        ``a`` is a scalar, a length-``blocks`` vector shared by the batch, or
        an (N, blocks) array / Tensor of per-image ratios. Odd input sizes are
        reflect-padded to even and the output cropped back to ``scale*H``.
        """
        cfg = self.config
        lr_data = _as_batch(lr)
        a_rows = self._split_rows(a, lr_data.shape[0])
        padded, (h, w) = _pad_even(lr_data)
        x_in = Tensor(padded)
        feat = self._apply_conv(x_in, "sr.head")
        feat = self._trunk(feat, a_rows, grad_mode)
        for j, r in enumerate(upsample_stages(cfg.scale)):
            feat = nx.leaky_relu(nx.pixel_shuffle(self._apply_conv(feat, f"sr.up{j}"), r), 0.1)
        feat = nx.leaky_relu(self._apply_conv(feat, "sr.hr"), 0.1)
        out = self._apply_conv(feat, "sr.last")
        if cfg.global_skip:
            out = out + nx.resize_bilinear(padded, scale=cfg.scale)
        sh, sw = h * cfg.scale, w * cfg.scale
        if out.shape[2:] != (sh, sw):
            out = out[:, :, :sh, :sw]
        return out

    def _split_rows(self, a, n):
        s = self.config.blocks
        if isinstance(a, Tensor):
            if a.shape == (n, s):
                return [[a[i, j] for j in range(s)] for i in range(n)]
            if a.shape == (s,):
                return [[a[j] for j in range(s)]] * n
            raise ValueError(f"split vector has shape {a.shape}, expected ({n}, {s}) or ({s},)")
        arr = np.asarray(a, dtype=np.float64)
        if arr.ndim == 0:
            arr = np.full((n, s), float(arr))
        elif arr.shape == (s,):
            arr = np.broadcast_to(arr, (n, s))
        elif arr.shape != (n, s):
            raise ValueError(f"split vector has shape {arr.shape}, expected ({n}, {s}) or ({s},)")
        return [[float(v) for v in row] for row in arr]

    def _trunk(self, feat, a_rows, grad_mode):
        blocks = [self.block(i) for i in range(self.config.blocks)]
        if not self.config.loc:
            for p in blocks:
                feat = residual_block(feat, p)
            return feat
        plain = all(not isinstance(v, Tensor) for row in a_rows for v in row)
        if plain and all(row == a_rows[0] for row in a_rows):
            for i, p in enumerate(blocks):
                feat = loc_forward(feat, p, a_rows[0][i], grad_mode)
            return feat
        outs = []
        for n, row in enumerate(a_rows):
            f = feat[n:n + 1]
            for i, p in enumerate(blocks):
                f = loc_forward(f, p, row[i], grad_mode)
            outs.append(f)
        return nx.concat(outs, axis=0)

    def forward_pipeline(self, lr, fixed_a=None, grad_mode="ste"):
        """Returns ``(I_sr, u_hat, a)``.

        With ``fixed_a`` set, D and A are bypassed and ``u_hat`` is None.
        """
        lr = _as_batch(lr)
        if fixed_a is not None:
            a = np.full((lr.shape[0], self.config.blocks), float(fixed_a))
            return self.super_resolve(lr, a, grad_mode), None, a
        u_hat = self.predict_degradation(lr)
        a = self.predict_split(u_hat)
        return self.super_resolve(lr, a, grad_mode), u_hat, a

    def infer(self, lr, fixed_a=None):
        """Inference on numpy data: clamped SR image plus û and a as arrays."""
        with nx.no_grad():
            sr, u_hat, a = self.forward_pipeline(lr, fixed_a=fixed_a)
        a = a.data if isinstance(a, Tensor) else a
        u = None if u_hat is None else u_hat.data
        return np.clip(sr.data, 0.0, 1.0), u, a


# -- checkpoints ----------------------------------------------------------
def save_checkpoint(path, model, extra_tensors=None, meta=None):
    """Write a JSON header followed by little-endian float64 blobs.

    File layout: 8-byte magic, uint64 header length, UTF-8 JSON header,
    then the tensors in declaration order at the header's byte offsets
    (relative to the start of the blob section).
    """
    tensors = [(n, p.data) for n, p in model.named_parameters()]
    tensors += list((extra_tensors or {}).items())
    entries, offset = [], 0
    for name, arr in tensors:
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "config": model.config.to_dict(),
        "layout_version": LAYOUT_VERSION,
        "seed": model.seed,
        "meta": meta or {},
        "tensors": entries,
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(path):
    """Returns (header, {name: array})."""
    blob = Path(path).read_bytes()
    if blob[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + n])
    base = 16 + n
    arrays = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        arrays[e["name"]] = np.frombuffer(blob, dtype="<f8", count=count, offset=start).reshape(e["shape"]).copy()
    return header, arrays


def load_checkpoint(path):
    header, arrays = read_checkpoint(path)
    model = SplitSR(ModelConfig(**header["config"]), seed=header["seed"])
    for name, p in model.params.items():
        if name not in arrays:
            raise ValueError(f"{path}: missing tensor {name}")
        if arrays[name].shape != p.shape:
            raise ValueError(f"{path}: tensor {name} has shape {arrays[name].shape}, expected {p.shape}")
        p.data = arrays[name]
    return model
