"""Training objectives: pixel L1, degradation regression, split sparsity,
non-local patch regularization and their weighted sum."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor


@dataclass
class LossWeights:
    """Weights of the auxiliary terms; the pixel loss always has weight 1.

    ``perceptual`` and ``adversarial`` are extension points: they are only
    used when a caller supplies those terms to :func:`composite_loss`.
    """

    reg: float = 1.0
    perceptual: float = 0.0
    adversarial: float = 0.0
    nl: float = 1.0
    sparsity: float = 0.25

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative, got {v}")


def l_pix(sr, hr):
    """Mean absolute error."""
    return (nx.as_tensor(sr) - nx.as_tensor(hr)).abs().mean()


def l_reg(u_hat, u):
    return (nx.as_tensor(u_hat) - nx.as_tensor(u)).abs().mean()


def l_sparsity(a):
    """Sum of |a| per image, averaged over the batch for 2-d input."""
    a = nx.as_tensor(a)
    total = a.abs().sum()
    return total / a.shape[0] if a.ndim == 2 else total


@dataclass(frozen=True)
class PatchIndex:
    query: tuple
    matches: tuple  # ascending distance
    distances: tuple
    patch: int

    @property
    def k(self):
        return len(self.matches)


def grid_positions(h, w, p, stride):
    return [(r, c) for r in range(0, h - p + 1, stride) for c in range(0, w - p + 1, stride)]


def knn_patches(lr_patch, query_pos, p=16, stride=4, k=3):
    """The ``k`` grid patches closest (Euclidean) to the query, excluding itself.

    ``lr_patch`` is (C, H, W). Ties go to the lexicographically smaller
    ``(row, col)``.
    """
    img = np.asarray(lr_patch.data if isinstance(lr_patch, Tensor) else lr_patch, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if k < 0:
        raise ValueError("k must be non-negative")
    qr, qc = query_pos
    h, w = img.shape[1:]
    if qr < 0 or qc < 0 or qr + p > h or qc + p > w:
        raise ValueError(f"query patch at {query_pos} of side {p} exceeds the {h}x{w} image")
    cands = [pos for pos in grid_positions(h, w, p, stride) if pos != tuple(query_pos)]
    if len(cands) < k:
        raise ValueError(f"only {len(cands)} candidate patches for k={k}")
    q = img[:, qr:qr + p, qc:qc + p]
    rows = np.array([c[0] for c in cands])
    cols = np.array([c[1] for c in cands])
    win = np.lib.stride_tricks.sliding_window_view(img, (p, p), axis=(1, 2))  # C, h', w', p, p
    diffs = win[:, rows, cols] - q[:, None]
    dist = np.sqrt(np.einsum("nipq,nipq->i", diffs, diffs))
    order = np.lexsort((cols, rows, dist))[:k]
    return PatchIndex(tuple(int(x) for x in query_pos), tuple(cands[i] for i in order),
                      tuple(float(dist[i]) for i in order), p)


def _crop(img, pos, size):
    r, c = pos
    return img[:, r:r + size, c:c + size]


def l_nonlocal(lr_patch, sr_patch, index, scale, normalize=False):
    """Mismatch between LR- and SR-space sums of query-to-neighbour distances.

    Both sums include the distance from the query to the zero patch. The
    normalizer is ``max(k, 1)``. With ``normalize`` each distance is divided
    by the square root of its patch's element count (RMS distance), which
    removes the dependence on the LR/SR patch size.
    """
    lr = nx.as_tensor(lr_patch)
    sr = nx.as_tensor(sr_patch)
    p, ps = index.patch, index.patch * scale
    q_lr = _crop(lr, index.query, p)
    q_sr = _crop(sr, tuple(x * scale for x in index.query), ps)

    def dist(a, b=None):
        d = nx.l2_norm(a if b is None else a - b)
        return d / np.sqrt(a.data.size) if normalize else d

    sum_lr = dist(q_lr)
    sum_sr = dist(q_sr)
    for pos in index.matches:
        sum_lr = sum_lr + dist(q_lr, _crop(lr, pos, p))
        sum_sr = sum_sr + dist(q_sr, _crop(sr, tuple(x * scale for x in pos), ps))
    return (sum_lr.detach() - sum_sr).abs() / max(index.k, 1)


def composite_loss(terms, weights=None):
    """Weighted total: pix + reg*L_reg + perceptual*L_per + adversarial*L_adv + nl*L_nl + sparsity*L_a.

    ``terms`` maps "pix", "reg", "per", "adv", "nl", "a" to scalar Tensors.
    A term with a zero weight may be absent; a weighted term must be given.
    """
    w = weights or LossWeights()
    if "pix" not in terms:
        raise KeyError("composite loss needs the pixel term")
    total = terms["pix"]
    for key, lam in (("reg", w.reg), ("per", w.perceptual), ("adv", w.adversarial),
                     ("nl", w.nl), ("a", w.sparsity)):
        if lam == 0:
            continue
        if key not in terms:
            raise KeyError(f"loss term {key!r} has weight {lam} but was not supplied")
        total = total + lam * terms[key]
    return total
