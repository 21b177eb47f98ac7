"""Global and spatial objectives, each returning a value and its gradients.

All batched functions take ``(N, ...)`` arrays and average per-sample losses
over the batch. Target-branch inputs are treated as constants: no function
here ever produces a gradient for them.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .augment import AffineWarp, cell_centers

logger = logging.getLogger(__name__)

KL_EPS = 1e-8
DEFAULT_LAMBDAS = {"sal": 0.10, "ppda": 0.05, "ram": 0.02}
SAL_LAYERS = ("f2", "f3", "f4")


class DegenerateEmbeddingError(ValueError):
    pass


@dataclass
class LossReport:
    global_: float
    sal: float
    ppda: float
    ram: float
    total: float
    lambdas: dict
    empty_masks: int = 0
    mean_mask: float = 0.0
    empty_pairs: int = 0
    mean_valid_pairs: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["global"] = d.pop("global_")
        return d


# -- global -----------------------------------------------------------------

def _normalize(v, axis=-1):
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(n == 0):
        raise DegenerateEmbeddingError("zero-norm embedding")
    return v / n, n


def _cosine_term(q, z):
    """``||q/|q| - z/|z|||^2`` per row and its gradient w.r.t. ``q``."""
    qn, qnorm = _normalize(q)
    zn, _ = _normalize(z)
    cos = np.sum(qn * zn, axis=-1, keepdims=True)
    grad = -2.0 * (zn - cos * qn) / qnorm
    return 2.0 - 2.0 * cos[..., 0], grad


def global_loss(pred1, tgt_proj2, pred2, tgt_proj1):
    """Symmetrized normalized MSE between predictions and target projections.

    Returns ``(value, grad_pred1, grad_pred2)``; the value is the batch mean of
    the per-sample sum of both view terms.
    """
    arrays = [np.atleast_2d(a) for a in (pred1, tgt_proj2, pred2, tgt_proj1)]
    if len({a.shape for a in arrays}) != 1:
        raise ValueError("prediction and projection shapes differ")
    p1, z2, p2, z1 = arrays
    n = p1.shape[0]
    l1, g1 = _cosine_term(p1, z2)
    l2, g2 = _cosine_term(p2, z1)
    value = float(np.mean(l1 + l2))
    g1, g2 = g1 / n, g2 / n
    if np.ndim(pred1) == 1:
        g1, g2 = g1[0], g2[0]
    return value, g1, g2


# -- saliency alignment -----------------------------------------------------

def saliency(f):
    """Per-location L1 norm over channels, L2-normalized over the map.

    Works on ``(H, W, C)`` or ``(N, H, W, C)``. An all-zero map gives an
    all-zero saliency.
    """
    a = np.abs(f).sum(axis=-1)
    norm = np.sqrt(np.sum(a * a, axis=(-2, -1), keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    return a / safe


def saliency_backward(f, grad_s):
    a = np.abs(f).sum(axis=-1)
    norm = np.sqrt(np.sum(a * a, axis=(-2, -1), keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    s = a / safe
    da = (grad_s - s * np.sum(s * grad_s, axis=(-2, -1), keepdims=True)) / safe
    da = np.where(norm > 0, da, 0.0)
    return da[..., None] * np.sign(f)


def bilinear_sample(grid, cont):
    """Sample ``grid (..., H, W)`` at continuous cell indices ``cont (..., h, w, 2)``.

    Leading batch dimensions of ``grid`` and ``cont`` must match. Edges clamp.
    """
    h, w = grid.shape[-2:]
    y = np.clip(cont[..., 0], 0, h - 1)
    x = np.clip(cont[..., 1], 0, w - 1)
    y0 = np.floor(y).astype(int)
    x0 = np.floor(x).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    ty, tx = y - y0, x - x0
    flat = grid.reshape(*grid.shape[:-2], h * w)
    lead = flat.shape[:-1]
    flat = flat.reshape(-1, h * w)
    bidx = np.arange(flat.shape[0]).reshape(-1, *([1] * (y.ndim - len(lead))))
    bidx = bidx.reshape(*lead, *([1] * (y.ndim - len(lead)))) if lead else 0

    def at(r, c):
        return flat[bidx, r * w + c] if lead else flat[0, r * w + c]

    return ((1 - ty) * (1 - tx) * at(y0, x0) + (1 - ty) * tx * at(y0, x1)
            + ty * (1 - tx) * at(y1, x0) + ty * tx * at(y1, x1))


def _batched_grid(warps, res_src, res_dst):
    """Continuous destination indices ``(N, H, W, 2)`` and masks for a warp per sample."""
    mats = np.stack([w.matrix for w in warps])                     # (N, 2, 3)
    yx = np.einsum("hwk,nik->nhwi", cell_centers(res_src), mats[:, :, :2]) + mats[:, None, None, :, 2]
    mask = np.all((yx >= 0.0) & (yx <= 1.0), axis=-1)
    return yx * np.asarray(res_dst, dtype=np.float64) - 0.5, mask


def sal_loss_maps(s_on, s_tg, warp: AffineWarp):
    """Masked MSE between one online saliency map and the warped target map.

    Returns ``(value, grad_s_on, mask_size)``; zero when nothing overlaps.
    """
    v, g, m = _sal_batch(s_on[None], s_tg[None], [warp])
    return v, g[0], int(m[0])


def _sal_batch(s_on, s_tg, warps):
    cont, mask = _batched_grid(warps, s_on.shape[1:], s_tg.shape[1:])
    sizes = mask.sum(axis=(1, 2))
    sampled = bilinear_sample(s_tg, cont)
    diff = np.where(mask, s_on - sampled, 0.0)
    denom = np.maximum(sizes, 1)[:, None, None]
    per = np.sum(diff * diff, axis=(1, 2)) / denom[:, 0, 0]
    return float(per.sum()), (2.0 * diff / denom).astype(s_on.dtype), sizes


def sal_loss(f_on, f_tg, warps):
    """Batched SAL on one layer: ``f_on, f_tg (N, H, W, C)``, one warp per sample.

    Returns ``(value, grad_f_on, mask_sizes)``. Samples with an empty overlap
    contribute zero.
    """
    s_on = saliency(f_on)
    s_tg = saliency(f_tg)
    n = f_on.shape[0]
    total, grad_s, sizes = _sal_batch(s_on, s_tg, warps)
    return total / n, saliency_backward(f_on, grad_s / n), sizes


# -- grid pooling -----------------------------------------------------------

def pool_matrix(side: int, grid: int) -> np.ndarray:
    """Adaptive average pooling of a ``side x side`` map into ``grid x grid`` cells.

    Returns a ``(grid*grid, side*side)`` matrix; cell bounds follow
    ``floor(i*side/grid) .. ceil((i+1)*side/grid)``.
    """
    g = min(grid, side)
    one = np.zeros((g, side))
    for i in range(g):
        lo = (i * side) // g
        hi = -((-(i + 1) * side) // g)
        one[i, lo:hi] = 1.0 / (hi - lo)
    return np.einsum("ab,cd->acbd", one, one).reshape(g * g, side * side)


def grid_pool(f, grid):
    """``(N, H, W, C) -> (N, g*g, C)`` cell means, with ``g = min(grid, H)``."""
    n, h, w, c = f.shape
    if h != w:
        raise ValueError("square feature maps expected")
    pm = pool_matrix(h, grid).astype(f.dtype)
    return np.einsum("pq,nqc->npc", pm, f.reshape(n, h * w, c)), pm


def grid_unpool(grad_cells, pm, shape):
    n, h, w, c = shape
    return np.einsum("pq,npc->nqc", pm, grad_cells).reshape(shape)


# -- prototype distribution alignment ---------------------------------------

@dataclass
class PrototypeBank:
    vectors: np.ndarray  # (K, C)
    tau: float = 0.1

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 2:
            raise ValueError("need at least two prototypes")
        if not self.tau > 0:
            raise ValueError("temperature must be positive")

    @classmethod
    def random(cls, k, dim, rng, tau=0.1, dtype=np.float32):
        v = rng.standard_normal((k, dim))
        return cls((v / np.linalg.norm(v, axis=1, keepdims=True)).astype(dtype), tau)

    def renormalize(self):
        self.vectors = (self.vectors / np.linalg.norm(self.vectors, axis=1, keepdims=True)
                        ).astype(self.vectors.dtype)


def soft_assign(patches, prototypes, tau):
    """Temperature softmax of cosine similarity between patches and prototypes.

    ``patches (..., P, C)``, ``prototypes (K, C)``. Zero-norm patches get the
    uniform distribution. Returns ``(assignments, cache)``.
    """
    pn = np.linalg.norm(patches, axis=-1, keepdims=True)
    dead = pn == 0
    if np.any(dead):
        logger.debug("%d zero-norm patches assigned uniformly", int(dead.sum()))
    vn = patches / np.where(dead, 1.0, pn)
    kn = np.linalg.norm(prototypes, axis=-1, keepdims=True)
    pk = prototypes / kn
    logits = vn @ pk.T / tau
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    q = e / e.sum(axis=-1, keepdims=True)
    return q, (vn, pn, dead, pk, kn)


def soft_assign_backward(grad_q, q, cache, tau):
    vn, pn, dead, pk, kn = cache
    dlog = q * (grad_q - np.sum(q * grad_q, axis=-1, keepdims=True))
    dlog = np.where(dead, 0.0, dlog)
    dvn = dlog @ pk / tau
    dpk = dlog.reshape(-1, dlog.shape[-1]).T @ vn.reshape(-1, vn.shape[-1]) / tau
    dpatch = (dvn - vn * np.sum(vn * dvn, axis=-1, keepdims=True)) / np.where(dead, 1.0, pn)
    dpatch = np.where(dead, 0.0, dpatch)
    dproto = (dpk - pk * np.sum(pk * dpk, axis=-1, keepdims=True)) / kn
    return dpatch, dproto


def symmetric_kl(a, b, eps=KL_EPS):
    """``KL(a||b) + KL(b||a)`` over the last axis with clamped logs.

    Returns ``(value, grad_a)``.
    """
    la = np.log(np.maximum(a, eps))
    lb = np.log(np.maximum(b, eps))
    value = np.sum((a - b) * (la - lb), axis=-1)
    grad = (la - lb) + (a - b) * np.where(a > eps, 1.0 / np.maximum(a, eps), 0.0)
    return value, grad


def part_distribution(f, bank: PrototypeBank, grid):
    cells, pm = grid_pool(f, grid)
    q, cache = soft_assign(cells, bank.vectors, bank.tau)
    return q.mean(axis=-2), (cells, pm, q, cache)


def ppda_loss(f_on, f_tg, bank: PrototypeBank, grid=7, target_vectors=None):
    """Batched symmetric KL between online and target part distributions.

    The target distribution is a constant; pass ``target_vectors`` to pin the
    prototypes it is computed with (defaults to the bank itself).
    Returns ``(value, grad_f_on, grad_bank)``.
    """
    if f_on.shape[-1] != bank.vectors.shape[1] or f_tg.shape[-1] != bank.vectors.shape[1]:
        raise ValueError("feature channels do not match the prototype dimension")
    n = f_on.shape[0]
    q_on, (cells, pm, q, cache) = part_distribution(f_on, bank, grid)
    tg_bank = bank if target_vectors is None else PrototypeBank(target_vectors, bank.tau)
    q_tg, _ = part_distribution(f_tg, tg_bank, grid)
    vals, dq_on = symmetric_kl(q_on, q_tg)
    dq = np.repeat(dq_on[:, None, :], q.shape[1], axis=1) / (q.shape[1] * n)
    dcells, dbank = soft_assign_backward(dq, q, cache, bank.tau)
    return float(vals.mean()), grid_unpool(dcells, pm, f_on.shape), dbank


# -- region affinity matching -----------------------------------------------

def region_vectors(f, grid, strict=True):
    """Unit-normalized grid-cell means ``(N, P, C)``.

    With ``strict`` a zero-norm cell raises; otherwise it stays a zero vector
    and the returned mask marks it dead.
    """
    cells, pm = grid_pool(f, grid)
    norm = np.linalg.norm(cells, axis=-1, keepdims=True)
    dead = norm[..., 0] == 0
    if strict and np.any(dead):
        idx = np.argwhere(dead)[0]
        raise DegenerateEmbeddingError(f"zero-norm region vector at cell {tuple(int(i) for i in idx)}")
    safe = np.where(dead[..., None], 1.0, norm)
    return cells / safe, (cells, safe, pm, dead)


def region_affinity(f, grid=6):
    """Cosine-distance matrix between grid-cell mean vectors, ``(..., P, P)``."""
    single = f.ndim == 3
    v, _ = region_vectors(f[None] if single else f, grid)
    a = 1.0 - v @ np.swapaxes(v, -1, -2)
    return a[0] if single else a


def region_index_map(warp: AffineWarp, g: int):
    """Flat region index in the other view for each of the ``g*g`` regions, -1 if outside."""
    yx = warp(cell_centers((g, g)))
    ok = np.all((yx >= 0) & (yx <= 1), axis=-1)
    cell = np.minimum((yx * g).astype(int), g - 1)
    flat = cell[..., 0] * g + cell[..., 1]
    return np.where(ok, flat, -1).reshape(-1)


def ram_loss(f_on, f_tg, warps, grid=6):
    """Batched affinity-matrix MSE over regions valid in both views.

    A region is valid when its warped center lands inside the other view and
    neither its online vector nor its matched target vector is all zeros.
    Returns ``(value, grad_f_on, valid_pair_counts)``.
    """
    n = f_on.shape[0]
    v_on, (cells, norm, pm, dead_on) = region_vectors(f_on, grid, strict=False)
    v_tg, (_, _, _, dead_tg) = region_vectors(f_tg, grid, strict=False)
    g = int(round(np.sqrt(v_on.shape[1])))
    a_on = 1.0 - v_on @ np.swapaxes(v_on, -1, -2)
    a_tg = 1.0 - v_tg @ np.swapaxes(v_tg, -1, -2)
    total = 0.0
    da = np.zeros_like(a_on)
    pairs = np.zeros(n, dtype=int)
    for b in range(n):
        idx = region_index_map(warps[b], g)
        ok = idx >= 0
        ok[ok] &= ~dead_tg[b][idx[ok]]
        ok &= ~dead_on[b]
        valid = np.flatnonzero(ok)
        if valid.size == 0:
            continue
        mapped = idx[valid]
        d = a_on[b][np.ix_(valid, valid)] - a_tg[b][np.ix_(mapped, mapped)]
        npairs = valid.size ** 2
        total += float(np.sum(d * d)) / npairs
        da[b][np.ix_(valid, valid)] = 2.0 * d / npairs
        pairs[b] = npairs
    da /= n
    dv = -(da + np.swapaxes(da, -1, -2)) @ v_on
    dcells = (dv - v_on * np.sum(v_on * dv, axis=-1, keepdims=True)) / norm
    return total / n, grid_unpool(dcells, pm, f_on.shape), pairs


# -- combined ---------------------------------------------------------------

@dataclass
class LossSettings:
    lambdas: dict = field(default_factory=lambda: dict(DEFAULT_LAMBDAS))
    ppda_grid: int = 7
    ram_grid: int = 6
    symmetrize_spatial: bool = True

    def __post_init__(self):
        unknown = set(self.lambdas) - set(DEFAULT_LAMBDAS)
        if unknown:
            raise ValueError(f"unknown loss weights {sorted(unknown)}")
        self.lambdas = {k: float(self.lambdas.get(k, 0.0)) for k in DEFAULT_LAMBDAS}
        if min(self.lambdas.values()) < 0:
            raise ValueError("loss weights must be non-negative")


def _spatial_terms(on, tg, warps, bank, settings):
    """SAL, PPDA, RAM in one view-role direction, with gradients on ``on``."""
    grads = {}
    sal = 0.0
    sizes = []
    for layer in SAL_LAYERS:
        v, g, m = sal_loss(getattr(on, layer), getattr(tg, layer), warps)
        sal += v / len(SAL_LAYERS)
        grads[layer] = g / len(SAL_LAYERS)
        sizes.append(m)
    ppda, g_ppda, g_bank = ppda_loss(on.f3, tg.f3, bank, settings.ppda_grid)
    ram, g_ram, pairs = ram_loss(on.f3, tg.f3, warps, settings.ram_grid)
    lam = settings.lambdas
    grads = {k: lam["sal"] * g for k, g in grads.items()}
    grads["f3"] = grads["f3"] + lam["ppda"] * g_ppda + lam["ram"] * g_ram
    stats = {"mask_sizes": np.concatenate(sizes), "pairs": pairs}
    return (sal, ppda, ram), grads, lam["ppda"] * g_bank, stats


def combined_loss(on1, on2, tg1, tg2, warps12, bank: PrototypeBank,
                  settings: LossSettings | None = None):
    """Weighted sum of the global and spatial terms for a two-view batch.

    ``on1/on2`` are online pyramids of views 1 and 2 (with ``pred``), ``tg1/tg2``
    the target pyramids, ``warps12`` one view-1 to view-2 warp per sample.
    Returns ``(report, grads)`` with ``grads`` keyed ``online1``, ``online2``,
    ``target1``, ``target2`` (all zero) and ``bank``.
    """
    settings = settings or LossSettings()
    lam = settings.lambdas
    g_val, dpred1, dpred2 = global_loss(on1.pred, tg2.proj, on2.pred, tg1.proj)
    grads1 = {"pred": dpred1}
    grads2 = {"pred": dpred2}
    terms_a, ga, bank_a, stats_a = _spatial_terms(on1, tg2, warps12, bank, settings)
    directions = [(terms_a, ga, bank_a, stats_a, grads1)]
    if settings.symmetrize_spatial:
        warps21 = [w.inverse() for w in warps12]
        directions.append((*_spatial_terms(on2, tg1, warps21, bank, settings), grads2))
    scale = 1.0 / len(directions)
    sal = ppda = ram = 0.0
    bank_grad = np.zeros_like(bank.vectors)
    masks, pairs = [], []
    for (s, p, r), g, gb, st, dest in directions:
        sal += scale * s
        ppda += scale * p
        ram += scale * r
        bank_grad += scale * gb
        for k, v in g.items():
            dest[k] = scale * v
        masks.append(st["mask_sizes"])
        pairs.append(st["pairs"])
    total = g_val + lam["sal"] * sal + lam["ppda"] * ppda + lam["ram"] * ram
    masks = np.concatenate(masks)
    pairs = np.concatenate(pairs)
    report = LossReport(g_val, sal, ppda, ram, total, dict(lam),
                        empty_masks=int(np.sum(masks == 0)), mean_mask=float(masks.mean()),
                        empty_pairs=int(np.sum(pairs == 0)), mean_valid_pairs=float(pairs.mean()))
    if report.empty_masks:
        logger.debug("%d empty overlap masks", report.empty_masks)
    grads = {
        "online1": grads1, "online2": grads2,
        "target1": {k: np.zeros_like(getattr(tg1, k)) for k in ("f2", "f3", "f4", "proj")},
        "target2": {k: np.zeros_like(getattr(tg2, k)) for k in ("f2", "f3", "f4", "proj")},
        "bank": bank_grad,
    }
    return report, grads
