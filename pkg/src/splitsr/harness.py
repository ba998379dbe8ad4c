"""Two-stage training, evaluation and desk-scale dataset helpers."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .cost import model_cost
from .degrade import read_manifest, synth_dataset, synthetic_hr_images
from .losses import LossWeights, composite_loss, grid_positions, knn_patches, l_nonlocal, l_pix, l_reg, l_sparsity
from .metrics import evaluate_pair, load_png, psnr_y, save_png
from .model import SplitSR, load_checkpoint, preset, read_checkpoint, save_checkpoint
from .numerics import Adam, Tensor, resize_bicubic

log = logging.getLogger(__name__)

STAGES = ("pretrain", "joint")


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    iterations: int = 1_000_000
    batch_size: int = 24
    lr: float | None = None  # 1e-4 for pretrain, 1e-6 for joint
    lr_decay: float = 10.0
    lr_decay_every: int = 250_000
    weights: LossWeights = field(default_factory=LossWeights)
    k: int = 3
    nl_patch: int = 16
    nl_stride: int = 4
    hr_patch: int = 256
    seed: int = 0
    preset: str = "dcs"
    model: dict = field(default_factory=dict)  # ModelConfig overrides
    fixed_a: float | None = None
    grad_mode: str = "ste"
    log_interval: int = 100
    checkpoint_every: int = 0
    workers: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.stage == "pretrain":
            if self.fixed_a is None:
                self.fixed_a = 0.5
        elif self.fixed_a is not None:
            raise ValueError("joint training learns a; fixed_a must be unset")
        if self.lr is None:
            self.lr = 1e-4 if self.stage == "pretrain" else 1e-6

    @classmethod
    def desk(cls, stage="pretrain", **overrides):
        """Small CPU-friendly configuration: 2 LOC blocks, 8 channels, x2, 48px HR patches."""
        kw = dict(stage=stage, iterations=200, batch_size=4, hr_patch=48, preset="desk",
                  lr=2e-3 if stage == "pretrain" else 3e-4, lr_decay_every=10 ** 9, log_interval=1)
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self):
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def model_config(self):
        return preset(self.preset, **self.model)

    def learning_rate(self, iteration):
        return self.lr * self.lr_decay ** -(iteration // self.lr_decay_every)


@dataclass
class RunLog:
    records: list = field(default_factory=list)

    def append(self, rec):
        self.records.append(dict(rec))

    def column(self, key):
        return [r[key] for r in self.records]

    def to_jsonl(self, with_time=False):
        rows = self.records if with_time else [{k: v for k, v in r.items() if k != "wall_time"} for r in self.records]
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


# -- data -----------------------------------------------------------------
class PairSet:
    """In-memory LR/HR pairs from a manifest."""

    def __init__(self, manifest):
        self.records = read_manifest(manifest)
        if not self.records:
            raise ValueError(f"{manifest}: empty manifest")
        self.lr = [load_png(r["lr"]) for r in self.records]
        self.hr = [load_png(r["hr"]) for r in self.records]
        self.u = [np.asarray(r["u"], dtype=np.float64) if "u" in r else None for r in self.records]
        self.scales = {int(r["scale"]) for r in self.records}

    def __len__(self):
        return len(self.records)


def make_batch(data, config, scale, iteration):
    """Batch for one iteration; depends only on (seed, iteration)."""
    rng = np.random.default_rng([config.seed, iteration])
    lp = config.hr_patch // scale
    lrs, hrs, us, queries = [], [], [], []
    for _ in range(config.batch_size):
        i = int(rng.integers(len(data)))
        lr, hr = data.lr[i], data.hr[i]
        lh, lw = lr.shape[1:]
        if lh < lp or lw < lp:
            raise ValueError(f"LR image {data.records[i]['lr']} smaller than the {lp}px training patch")
        r = int(rng.integers(lh - lp + 1))
        c = int(rng.integers(lw - lp + 1))
        lr_p = lr[:, r:r + lp, c:c + lp]
        hr_p = hr[:, r * scale:(r + lp) * scale, c * scale:(c + lp) * scale]
        if config.augment:
            if rng.random() < 0.5:
                lr_p, hr_p = lr_p[:, :, ::-1], hr_p[:, :, ::-1]
            if rng.random() < 0.5:
                lr_p, hr_p = lr_p[:, ::-1], hr_p[:, ::-1]
        lrs.append(lr_p)
        hrs.append(hr_p)
        us.append(data.u[i])
        grid = grid_positions(lp, lp, config.nl_patch, config.nl_stride)
        queries.append(grid[int(rng.integers(len(grid)))] if grid else None)
    return {
        "lr": np.ascontiguousarray(np.stack(lrs)),
        "hr": np.ascontiguousarray(np.stack(hrs)),
        "u": None if any(u is None for u in us) else np.stack(us),
        "queries": queries,
    }


def _batches(data, config, scale, start, stop):
    """Yield batches in order, optionally prepared ahead on worker threads."""
    if config.workers <= 0:
        for t in range(start, stop):
            yield make_batch(data, config, scale, t)
        return
    depth = 2 * config.workers
    with ThreadPoolExecutor(config.workers) as pool:
        pending = deque()
        nxt = start
        while nxt < stop and len(pending) < depth:
            pending.append(pool.submit(make_batch, data, config, scale, nxt))
            nxt += 1
        while pending:
            batch = pending.popleft().result()
            if nxt < stop:
                pending.append(pool.submit(make_batch, data, config, scale, nxt))
                nxt += 1
            yield batch


# -- training -------------------------------------------------------------
def nonlocal_term(batch, sr, config, scale):
    terms = []
    for n, q in enumerate(batch["queries"]):
        idx = knn_patches(batch["lr"][n], q, config.nl_patch, config.nl_stride, config.k)
        terms.append(l_nonlocal(batch["lr"][n], sr[n], idx, scale))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total / len(terms)


def train_step(model, batch, config, scale):
    """Forward + backward for one batch. Returns (loss terms, a array)."""
    if config.stage == "pretrain":
        sr, _, a = model.forward_pipeline(batch["lr"], fixed_a=config.fixed_a, grad_mode=config.grad_mode)
        terms = {"pix": l_pix(sr, batch["hr"])}
        total = terms["pix"]
    else:
        sr, u_hat, a = model.forward_pipeline(batch["lr"], grad_mode=config.grad_mode)
        terms = {"pix": l_pix(sr, batch["hr"]), "reg": l_reg(u_hat, batch["u"]), "a": l_sparsity(a)}
        if config.weights.nl:
            terms["nl"] = nonlocal_term(batch, sr, config, scale)
        total = composite_loss(terms, config.weights)
    total.backward()
    values = {f"l_{k}": float(v.data) for k, v in terms.items()}
    values["loss"] = float(total.data)
    return values, (a.data if isinstance(a, Tensor) else np.asarray(a))


def _optimizer(model, config):
    prefix = "sr." if config.stage == "pretrain" else ""
    names = [n for n, _ in model.named_parameters() if n.startswith(prefix)]
    return names, Adam([model[n] for n in names], lr=config.learning_rate(0))


def _check_data(data, model, config):
    scale = model.config.scale
    if data.scales != {scale}:
        raise ValueError(f"manifest scales {sorted(data.scales)} do not match the model scale {scale}")
    if config.stage == "joint":
        if not model.config.predictors:
            raise ValueError("joint training needs a model with D and A")
        if any(u is None for u in data.u):
            raise ValueError("joint training needs degradation vectors 'u' in every manifest record")
    if config.hr_patch % scale:
        raise ValueError(f"hr_patch {config.hr_patch} not divisible by scale {scale}")


def param_checksum(model, prefix=""):
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        if name.startswith(prefix):
            h.update(name.encode())
            h.update(p.data.tobytes())
    return h.hexdigest()


def train(config, manifest, out_dir=None, init=None, resume=None, data=None):
    """Run one training stage. Returns (model, RunLog).

    ``init`` takes starting weights from a checkpoint path or a model (copied;
    fresh optimizer). ``resume`` also restores the optimizer state and the
    iteration counter.
    """
    data = data or PairSet(manifest)
    start = 0
    if resume is not None:
        header, arrays = read_checkpoint(resume)
        model = load_checkpoint(resume)
        meta = header["meta"]
        start = int(meta["iteration"])
    elif isinstance(init, SplitSR):
        model = SplitSR(init.config)
        for name, t in init.params.items():
            model.params[name].data = t.data.copy()
    elif init is not None:
        model = load_checkpoint(init)
    else:
        model = SplitSR(config.model_config(), seed=config.seed)
    _check_data(data, model, config)
    scale = model.config.scale
    names, opt = _optimizer(model, config)
    if resume is not None:
        if meta.get("stage") != config.stage:
            raise ValueError(f"checkpoint is from stage {meta.get('stage')!r}, config says {config.stage!r}")
        opt.state.step = int(meta["adam_step"])
        if opt.state.step:
            opt.state.m = [arrays[f"adam.m.{n}"].copy() for n in names]
            opt.state.v = [arrays[f"adam.v.{n}"].copy() for n in names]
    runlog = RunLog()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    lp = config.hr_patch // scale
    acc, acc_n, t0 = {}, 0, time.perf_counter()
    for t, batch in zip(range(start, config.iterations), _batches(data, config, scale, start, config.iterations)):
        opt.state.learning_rate = config.learning_rate(t)
        opt.zero_grad()
        values, a = train_step(model, batch, config, scale)
        opt.step()
        for k, v in values.items():
            acc[k] = acc.get(k, 0.0) + v
        acc_n += 1
        if (t + 1) % config.log_interval == 0 or t + 1 == config.iterations:
            mean_a = a.mean(axis=0)
            rec = {"iteration": t + 1, **{k: v / acc_n for k, v in acc.items()},
                   "mean_a": float(mean_a.mean()),
                   "gflops": model_cost(model.config, (lp, lp), mean_a).gflops,
                   "wall_time": time.perf_counter() - t0}
            runlog.append(rec)
            log.info("iter %d loss %.5f mean_a %.4f", t + 1, rec["loss"], rec["mean_a"])
            acc, acc_n = {}, 0
        if out is not None and config.checkpoint_every and (t + 1) % config.checkpoint_every == 0:
            save_training_checkpoint(out / f"checkpoint_{t + 1:07d}.bin", model, opt, names, config, t + 1)
    if out is not None:
        save_training_checkpoint(out / "checkpoint.bin", model, opt, names, config, max(config.iterations, start))
        (out / "runlog.jsonl").write_text(runlog.to_jsonl())
        (out / "timing.jsonl").write_text("".join(
            json.dumps({"iteration": r["iteration"], "wall_time": r["wall_time"]}) + "\n" for r in runlog.records))
    return model, runlog


def save_training_checkpoint(path, model, opt, names, config, iteration):
    extra = {}
    if opt.state.step:
        extra.update({f"adam.m.{n}": m for n, m in zip(names, opt.state.m)})
        extra.update({f"adam.v.{n}": v for n, v in zip(names, opt.state.v)})
    # prefetch threads do not change results, so they stay out of the checkpoint
    cfg = {k: v for k, v in config.to_dict().items() if k != "workers"}
    meta = {"iteration": iteration, "stage": config.stage, "adam_step": opt.state.step, "train_config": cfg}
    save_checkpoint(path, model, extra, meta)


# -- evaluation -----------------------------------------------------------
EVAL_FIELDS = ["id", "level", "psnr", "ssim", "bicubic_psnr", "mean_a", "gflops"]


def evaluate(model, manifest, fixed_a=None, out_csv=None, out_json=None, data=None):
    """Y-channel PSNR/SSIM per image and per level, plus mean a and GFLOPs.

    ``model`` may be a SplitSR or a checkpoint path. Models without D/A run
    at ``fixed_a`` (default 0.5).
    """
    if not isinstance(model, SplitSR):
        model = load_checkpoint(model)
    data = data or PairSet(manifest)
    scale = model.config.scale
    if data.scales != {scale}:
        raise ValueError(f"manifest scales {sorted(data.scales)} do not match the model scale {scale}")
    if fixed_a is None and not model.config.predictors:
        fixed_a = 0.5
    rows = []
    for rec, lr, hr in zip(data.records, data.lr, data.hr):
        sr, _, a = model.infer(lr, fixed_a=fixed_a)
        a = np.asarray(a)[0]
        res = evaluate_pair(sr[0], hr, scale, Path(rec["lr"]).stem, rec["level"])
        bic = np.clip(resize_bicubic(lr, size=hr.shape[1:]), 0, 1)
        rows.append({"id": res.image_id, "level": res.level, "psnr": res.psnr, "ssim": res.ssim,
                     "bicubic_psnr": psnr_y(bic, hr, scale), "mean_a": float(a.mean()),
                     "gflops": model_cost(model.config, lr.shape[1:], a).gflops})
    levels = sorted({r["level"] for r in rows})
    summary = []
    for lv in levels + ["all"]:
        sel = [r for r in rows if lv == "all" or r["level"] == lv]
        summary.append({"id": f"mean:{lv}", "level": lv,
                        **{k: float(np.mean([r[k] for r in sel])) for k in EVAL_FIELDS[2:]}})
    result = {"images": rows, "levels": summary}
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=EVAL_FIELDS)
            writer.writeheader()
            for r in rows + summary:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    if out_json is not None:
        Path(out_json).write_text(json.dumps(result, indent=2, sort_keys=True))
    return result


# -- desk helpers ---------------------------------------------------------
def desk_dataset(out_dir, count=16, levels=("S0",), scale=2, seed=0, size=96, workers=1, noise=0.0):
    """Procedural HR images plus a synthesized LR set under ``out_dir``."""
    out = Path(out_dir)
    hr_dir = out / "hr_src"
    hr_dir.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(synthetic_hr_images(count, size, seed, noise)):
        save_png(img, hr_dir / f"img_{i:04d}.png")
    return synth_dataset(hr_dir, list(levels), count, scale, seed, out / "pairs", workers=workers)
