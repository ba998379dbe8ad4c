"""Multi-level synthetic degradations and their 33-slot vector encoding.

Levels: S0 is plain bicubic downsampling; S1 and S2 apply one
blur -> resize -> noise -> JPEG stage drawn from a small and a large
parameter range; S3 applies two large-range stages. Every level ends with
a resize to exactly ``H/s x W/s``.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .jpeg import jpeg_degrade
from .numerics import resize

LEVELS = ("S0", "S1", "S2", "S3")
LAYOUT_VERSION = 1
VECTOR_DIM = 33
STAGE_SLOTS = 15
KERNEL_SIZE = 21

# per-level sampling ranges; S3 reuses S2 with the second stage's blur capped
LEVEL_RANGES = {
    "S1": dict(sigma=(0.2, 1.0), gaussian=(1 / 255, 10 / 255), poisson=(0.05, 1.0),
               resize=(0.85, 1.2), jpeg=(70, 95)),
    "S2": dict(sigma=(0.2, 3.0), gaussian=(1 / 255, 25 / 255), poisson=(0.05, 3.0),
               resize=(0.5, 1.5), jpeg=(30, 95)),
}
S3_SECOND_SIGMA_CAP = 1.5

# normalization ranges shared by every level so slots mean the same thing everywhere
NORM = dict(sigma=(0.0, 3.0), theta=(0.0, math.pi), resize=(0.5, 1.5),
            gaussian=(0.0, 25 / 255), poisson=(0.0, 3.0), jpeg=(10, 95), scale=(2, 4))

BLUR_KINDS = ("none", "isotropic", "anisotropic")
RESIZE_MODES = ("bilinear", "bicubic", "none")
NOISE_KINDS = ("none", "gaussian", "poisson")
FINAL_MODES = ("bilinear", "bicubic")


@dataclass(frozen=True)
class StageParams:
    blur_kind: str = "none"
    sigma_x: float = 0.0
    sigma_y: float = 0.0
    theta: float = 0.0
    resize_mode: str = "none"
    resize_scale: float = 1.0
    noise_kind: str = "none"
    noise_level: float = 0.0
    jpeg_applied: bool = False
    jpeg_quality: int = 95
    # 0.5 for a small-range stage, 1.0 for a large-range one
    tier: float = 1.0


@dataclass(frozen=True)
class DegradationRecipe:
    level: str
    stages: tuple = field(default_factory=tuple)
    final_resize_mode: str = "bicubic"
    sr_scale: int = 4

    def __post_init__(self):
        expected = {"S0": 0, "S1": 1, "S2": 1, "S3": 2}[self.level]
        if len(self.stages) != expected:
            raise ValueError(f"{self.level} needs {expected} stages, got {len(self.stages)}")
        if self.sr_scale not in (2, 3, 4):
            raise ValueError(f"sr_scale must be 2, 3 or 4, got {self.sr_scale}")


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _sample_stage(rng, ranges, tier, sigma_cap=None):
    lo, hi = ranges["sigma"]
    if sigma_cap is not None:
        hi = min(hi, sigma_cap)
    kw = {"tier": tier}
    kind = rng.choice(BLUR_KINDS, p=[0.1, 0.45, 0.45])
    kw["blur_kind"] = str(kind)
    if kind == "isotropic":
        s = rng.uniform(lo, hi)
        kw.update(sigma_x=s, sigma_y=s)
    elif kind == "anisotropic":
        kw.update(sigma_x=rng.uniform(lo, hi), sigma_y=rng.uniform(lo, hi), theta=rng.uniform(0, math.pi))
    mode = str(rng.choice(RESIZE_MODES))
    kw["resize_mode"] = mode
    if mode != "none":
        kw["resize_scale"] = rng.uniform(*ranges["resize"])
    noise = str(rng.choice(NOISE_KINDS, p=[0.1, 0.5, 0.4]))
    kw["noise_kind"] = noise
    if noise != "none":
        kw["noise_level"] = rng.uniform(*ranges[noise])
    if rng.random() < 0.9:
        kw.update(jpeg_applied=True, jpeg_quality=int(rng.integers(ranges["jpeg"][0], ranges["jpeg"][1] + 1)))
    return StageParams(**kw)


def sample_recipe(level, sr_scale=4, rng_seed=None):
    """Draw a recipe uniformly from the level's parameter ranges."""
    if level not in LEVELS:
        raise ValueError(f"unknown level {level!r}")
    rng = _rng(rng_seed)
    if level == "S0":
        return DegradationRecipe("S0", (), "bicubic", sr_scale)
    if level == "S1":
        stages = (_sample_stage(rng, LEVEL_RANGES["S1"], 0.5),)
    elif level == "S2":
        stages = (_sample_stage(rng, LEVEL_RANGES["S2"], 1.0),)
    else:
        stages = (_sample_stage(rng, LEVEL_RANGES["S2"], 1.0),
                  _sample_stage(rng, LEVEL_RANGES["S2"], 1.0, S3_SECOND_SIGMA_CAP))
    final = str(rng.choice(FINAL_MODES))
    return DegradationRecipe(level, stages, final, sr_scale)


# -- operations -----------------------------------------------------------
def gaussian_kernel(sigma_x, sigma_y, theta=0.0, size=KERNEL_SIZE):
    """Rotated anisotropic Gaussian sampled at pixel centers, summing to 1."""
    if size % 2 == 0 or size < 1:
        raise ValueError(f"kernel size must be odd, got {size}")
    if sigma_x <= 0 or sigma_y <= 0:
        raise ValueError("sigmas must be positive")
    r = size // 2
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1].astype(np.float64)
    c, s = math.cos(theta), math.sin(theta)
    u = c * xx + s * yy
    v = -s * xx + c * yy
    k = np.exp(-0.5 * ((u / sigma_x) ** 2 + (v / sigma_y) ** 2))
    return k / k.sum()


def blur(image, kernel):
    return np.stack([ndimage.correlate(ch, kernel, mode="reflect") for ch in image])


def add_noise(image, kind, level, rng, exact_poisson=False):
    """Additive Gaussian noise (std ``level``) or signal-dependent Poisson noise.

    Poisson noise models ``255/level`` photons per unit intensity; by default
    it is drawn from the matching Gaussian N(0, level*x/255).
    """
    if kind == "none":
        return image
    if kind == "gaussian":
        return image + rng.normal(0.0, level, image.shape)
    if kind == "poisson":
        x = np.clip(image, 0.0, None)
        if exact_poisson:
            return rng.poisson(x * 255.0 / level) * level / 255.0
        return image + rng.normal(0.0, 1.0, image.shape) * np.sqrt(level * x / 255.0)
    raise ValueError(f"unknown noise kind {kind!r}")


def apply_stage(image, stage, rng, exact_poisson=False):
    img = image
    if stage.blur_kind != "none":
        img = blur(img, gaussian_kernel(stage.sigma_x, stage.sigma_y, stage.theta))
    if stage.resize_mode != "none":
        h, w = img.shape[1:]
        size = (max(1, int(round(h * stage.resize_scale))), max(1, int(round(w * stage.resize_scale))))
        img = resize(img, size=size, kind=stage.resize_mode)
    if stage.noise_kind != "none":
        img = np.clip(add_noise(img, stage.noise_kind, stage.noise_level, rng, exact_poisson), 0.0, 1.0)
    if stage.jpeg_applied:
        img = jpeg_degrade(img, stage.jpeg_quality)
    return img


def apply_recipe(hr, recipe, rng_seed=None, exact_poisson=False):
    """Degrade a (3, H, W) image in [0, 1] into its (3, H/s, W/s) LR counterpart."""
    hr = np.asarray(hr, dtype=np.float64)
    _, h, w = hr.shape
    s = recipe.sr_scale
    if h % s or w % s or h % 2 or w % 2:
        raise ValueError(f"HR size {h}x{w} must be divisible by the scale {s} and by 2")
    rng = _rng(rng_seed)
    img = hr
    for stage in recipe.stages:
        img = apply_stage(img, stage, rng, exact_poisson)
    img = resize(img, size=(h // s, w // s), kind=recipe.final_resize_mode)
    return np.clip(img, 0.0, 1.0)


def degrade(hr, level, sr_scale=4, seed=0):
    """Sample and apply a recipe; returns (lr, recipe)."""
    rng = np.random.default_rng(seed)
    recipe = sample_recipe(level, sr_scale, rng)
    return apply_recipe(hr, recipe, rng), recipe


# -- vector codec ---------------------------------------------------------
def _norm(x, key):
    lo, hi = NORM[key]
    return (x - lo) / (hi - lo)


def _denorm(v, key):
    lo, hi = NORM[key]
    return lo + v * (hi - lo)


def _encode_stage(st):
    v = np.zeros(STAGE_SLOTS)
    v[0] = st.tier
    if st.blur_kind != "none":
        v[1 + BLUR_KINDS.index(st.blur_kind) - 1] = 1.0
        v[3] = _norm(st.sigma_x, "sigma")
        v[4] = _norm(st.sigma_y, "sigma")
        v[5] = _norm(st.theta, "theta")
    v[6 + RESIZE_MODES.index(st.resize_mode)] = 1.0
    if st.resize_mode != "none":
        v[9] = _norm(st.resize_scale, "resize")
    if st.noise_kind != "none":
        v[10 + NOISE_KINDS.index(st.noise_kind) - 1] = 1.0
        v[12] = _norm(st.noise_level, st.noise_kind)
    if st.jpeg_applied:
        v[13] = 1.0
        v[14] = _norm(st.jpeg_quality, "jpeg")
    return v


def encode_vector(recipe):
    """33-slot vector: two 15-slot stage blocks, then final-resize one-hot and scale."""
    u = np.zeros(VECTOR_DIM)
    for i, st in enumerate(recipe.stages):
        u[i * STAGE_SLOTS:(i + 1) * STAGE_SLOTS] = _encode_stage(st)
    u[30 + FINAL_MODES.index(recipe.final_resize_mode)] = 1.0
    u[32] = _norm(recipe.sr_scale, "scale")
    if u.min() < 0 or u.max() > 1:
        raise ValueError("recipe parameters fall outside the encodable ranges")
    return u


def _one_hot(v, names, allow_none=False):
    hot = [i for i, x in enumerate(v) if x > 0.5]
    if len(hot) > 1:
        raise ValueError(f"one-hot group {list(v)} has several active entries")
    if not hot:
        if not allow_none:
            raise ValueError(f"one-hot group {list(v)} has no active entry")
        return None
    return names[hot[0]]


def _decode_stage(v):
    kw = {"tier": float(v[0])}
    blur_kind = _one_hot(v[1:3], BLUR_KINDS[1:], allow_none=True)
    if blur_kind:
        kw.update(blur_kind=blur_kind, sigma_x=_denorm(v[3], "sigma"), sigma_y=_denorm(v[4], "sigma"),
                  theta=_denorm(v[5], "theta"))
    mode = _one_hot(v[6:9], RESIZE_MODES)
    kw["resize_mode"] = mode
    if mode != "none":
        kw["resize_scale"] = _denorm(v[9], "resize")
    noise = _one_hot(v[10:12], NOISE_KINDS[1:], allow_none=True)
    if noise:
        kw.update(noise_kind=noise, noise_level=_denorm(v[12], noise))
    if v[13] > 0.5:
        kw.update(jpeg_applied=True, jpeg_quality=int(round(_denorm(v[14], "jpeg"))))
    return StageParams(**kw)


def decode_vector(u):
    """Inverse of :func:`encode_vector`."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (VECTOR_DIM,):
        raise ValueError(f"degradation vector must have {VECTOR_DIM} entries, got {u.shape}")
    if not np.all(np.isfinite(u)) or u.min() < 0 or u.max() > 1:
        raise ValueError("degradation vector entries must lie in [0, 1]")
    tiers = (u[0], u[STAGE_SLOTS])
    if tiers[0] == 0 and tiers[1] == 0:
        level, stages = "S0", ()
    elif tiers[1] == 0:
        stage = _decode_stage(u[:STAGE_SLOTS])
        level = "S1" if tiers[0] == 0.5 else "S2"
        stages = (stage,)
    elif tiers[0] != 0:
        level = "S3"
        stages = (_decode_stage(u[:STAGE_SLOTS]), _decode_stage(u[STAGE_SLOTS:2 * STAGE_SLOTS]))
    else:
        raise ValueError("second stage present without a first stage")
    final = _one_hot(u[30:32], FINAL_MODES)
    scale = int(round(_denorm(u[32], "scale")))
    return DegradationRecipe(level, stages, final, scale)


# -- datasets -------------------------------------------------------------
def synthetic_hr_images(count, size=96, seed=0, noise=0.0):
    """Procedural HR test images: a colour gradient, band-limited sinusoidal
    textures (HR period 4..12 px, so nothing aliases at x2) and soft-blended discs."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    images = []
    for _ in range(count):
        img = np.empty((3, size, size))
        for ch in range(3):
            a, b = rng.uniform(-0.3, 0.3, 2)
            img[ch] = 0.5 + (a * xx + b * yy) / size
        for _ in range(4):
            period = rng.uniform(4.0, 12.0)
            ang, phase = rng.uniform(0, math.pi), rng.uniform(0, 2 * math.pi)
            amp = rng.uniform(0.05, 0.15) * rng.uniform(0.5, 1.0, 3)[:, None, None]
            img += amp * np.sin(2 * math.pi * (xx * math.cos(ang) + yy * math.sin(ang)) / period + phase)
        for _ in range(rng.integers(2, 5)):
            color = rng.uniform(0, 1, 3)[:, None, None]
            cy, cx = rng.uniform(0.1, 0.9, 2) * size
            r = rng.uniform(0.05, 0.2) * size
            disc = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
            img = np.where(disc, 0.5 * img + 0.5 * color, img)
        if noise:
            img += rng.normal(0, noise, (3, size, size))
        images.append(np.clip(img, 0.0, 1.0))
    return images


def modcrop(image, m):
    _, h, w = image.shape
    return image[:, :h - h % m, :w - w % m]


def _synth_one(args):
    index, hr, level, sr_scale, seed = args
    rng = np.random.default_rng([seed, index])
    hr = modcrop(hr, 2 * sr_scale)
    recipe = sample_recipe(level, sr_scale, rng)
    return hr, apply_recipe(hr, recipe, rng), recipe


def synth_dataset(hr_dir, level_mix, count, sr_scale, seed, out_dir, workers=1):
    """Write ``count`` LR/HR PNG pairs plus ``manifest.jsonl`` into ``out_dir``.

    Image ``i`` uses HR file ``i % n`` and level ``level_mix[i % len]``, with
    its own RNG stream seeded by ``(seed, i)`` so output does not depend on
    ``workers``. Returns the manifest path.
    """
    from .metrics import load_png, save_png

    if isinstance(level_mix, str):
        level_mix = [s.strip() for s in level_mix.split(",") if s.strip()]
    for lv in level_mix:
        if lv not in LEVELS:
            raise ValueError(f"unknown level {lv!r}")
    paths = sorted(p for p in Path(hr_dir).iterdir() if p.suffix.lower() == ".png")
    if not paths:
        raise ValueError(f"no PNG files in {hr_dir}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hrs = [load_png(p) for p in paths]
    jobs = [(i, hrs[i % len(hrs)], level_mix[i % len(level_mix)], sr_scale, seed) for i in range(count)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(_synth_one, jobs))
    else:
        results = [_synth_one(j) for j in jobs]
    lines = []
    for i, (hr, lr, recipe) in enumerate(results):
        hr_name, lr_name = f"hr_{i:05d}.png", f"lr_{i:05d}_{recipe.level}.png"
        save_png(hr, out / hr_name)
        save_png(lr, out / lr_name)
        rec = {"hr": hr_name, "lr": lr_name, "level": recipe.level, "scale": sr_scale,
               "u": [float(x) for x in encode_vector(recipe)], "layout_version": LAYOUT_VERSION}
        lines.append(json.dumps(rec))
    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(path):
    path = Path(path)
    records = []
    for line in path.read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            if rec.get("layout_version", LAYOUT_VERSION) != LAYOUT_VERSION:
                raise ValueError(f"{path}: unsupported layout_version {rec['layout_version']}")
            rec["hr"] = str(path.parent / rec["hr"])
            rec["lr"] = str(path.parent / rec["lr"])
            records.append(rec)
    return records
