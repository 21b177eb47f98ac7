"""Frozen-encoder evaluation, ablation runs and gradient checking.

The probe always reads the online encoder in eval mode (running BN
statistics) on an un-augmented, resized view of each image. Nothing here
writes to the encoder parameters or buffers it is given.
"""

from __future__ import annotations

import csv
import functools
import hashlib
import itertools
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import augment, encoder, synthdata, trainer
from .config import LOSS_NAMES, ProbeConfig, RunConfig, TrainConfig
from .losses import (LossSettings, PrototypeBank, combined_loss, global_loss, ppda_loss,
                     ram_loss, sal_loss)

MODALITY_ALIASES = {"fused": "fused", "visual": "visual_only", "marker": "marker_only",
                    "visual_only": "visual_only", "marker_only": "marker_only"}
AXES = {"edge_pose": ("x", "depth", "rotation"),
        "contact_point": ("x", "y", "z"),
        "force": ("fx", "fy", "fz")}
PROBE_TASKS = ("shape", "edge_pose")
CSV_FIELDS = ("subset", "modality", "seed", "task", "top1", "top5", "mae_0", "mae_1", "mae_2",
              "avg_mae", "checkpoint")


class TaskMismatchError(ValueError):
    pass


def resolve_modality(name: str) -> str:
    try:
        return MODALITY_ALIASES[name]
    except KeyError:
        raise ValueError(f"unknown modality {name!r}") from None


def subset_name(losses) -> str:
    losses = [l for l in LOSS_NAMES if l in losses]
    return "+".join(losses) if losses else "global"


# -- metrics ----------------------------------------------------------------

@dataclass
class MetricsReport:
    task: str
    kind: str
    top1: float | None = None
    top5: float | None = None
    mae: tuple[float, ...] | None = None
    avg_mae: float | None = None
    seed: int | None = None
    checkpoint: str | None = None
    n: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind == "classify":
            if not 0 <= self.top1 <= self.top5 <= 100:
                raise ValueError(f"inconsistent accuracies top1={self.top1} top5={self.top5}")
        elif self.kind == "regress":
            if min(self.mae) < 0 or self.avg_mae < 0:
                raise ValueError("negative MAE")
        else:
            raise ValueError(f"unknown task kind {self.kind!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["mae"] is not None:
            d["mae"] = list(d["mae"])
        return d

    @property
    def headline(self) -> float:
        """top1 for classification, average MAE for regression."""
        return self.top1 if self.kind == "classify" else self.avg_mae


def compute_metrics(predictions, labels, task: str) -> MetricsReport:
    """Top-1/top-5 (percent) from class scores, or per-axis and average MAE.

    For classification ``predictions`` are scores ``(N, K)`` and ``labels``
    integer classes; top-k uses ``k = min(5, K)``. For regression both are
    ``(N, D)`` arrays in label units.
    """
    kind = synthdata.TASK_INFO[task][0]
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if len(p) != len(y):
        raise ValueError(f"{len(p)} predictions for {len(y)} labels")
    if len(p) == 0:
        raise ValueError("no samples")
    if kind == "classify":
        if p.ndim != 2:
            raise ValueError("classification predictions must be (N, K) scores")
        k = min(5, p.shape[1])
        # rank of the true class: how many scores beat it (ties count against)
        true = p[np.arange(len(y)), y]
        rank = np.sum(p > true[:, None], axis=1)
        top1 = 100.0 * float(np.mean(rank < 1))
        top5 = 100.0 * float(np.mean(rank < k))
        return MetricsReport(task, kind, top1=top1, top5=top5, n=len(y))
    p = p.reshape(len(p), -1)
    y = y.reshape(len(y), -1)
    if p.shape != y.shape:
        raise ValueError(f"prediction shape {p.shape} != label shape {y.shape}")
    mae = np.abs(p - y).mean(axis=0)
    return MetricsReport(task, kind, mae=tuple(float(m) for m in mae),
                         avg_mae=float(mae.mean()), n=len(y))


# -- features ---------------------------------------------------------------

def frozen_checksum(state: trainer.TrainState) -> str:
    """Digest of the online parameters and their running statistics."""
    h = hashlib.sha256()
    for group in (state.online, state.online_buffers):
        for k, a in sorted(group.items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def eval_views(images, cfg: TrainConfig) -> np.ndarray:
    """Plain resized, normalized views of uint8 or [0, 1] images."""
    images = np.asarray(images)
    if images.dtype == np.uint8:
        images = images.astype(np.float64) / 255
    p = augment.ViewParams.identity(images.shape[1:3], cfg.input_size)
    return trainer.make_views(images, [p] * len(images), cfg)


def extract_features(state: trainer.TrainState, images, *, layer="rep", chunk=128) -> np.ndarray:
    """Encoder outputs ``layer`` (``rep``, ``f3`` ...) in eval mode, chunked."""
    out = []
    for i in range(0, len(images), chunk):
        v = eval_views(images[i:i + chunk], state.config)
        pyr = encoder.forward(state.online, v, train=False, predictor=False,
                              buffers=state.online_buffers)
        out.append(getattr(pyr, layer))
    return np.concatenate(out).astype(np.float64)


def _as_state(checkpoint) -> tuple[trainer.TrainState, str]:
    if isinstance(checkpoint, trainer.TrainState):
        return checkpoint, f"step{checkpoint.step}"
    path = Path(checkpoint)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    return trainer.load_checkpoint(path), str(path)


# -- linear heads -----------------------------------------------------------

def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _standardizer(x):
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    return mu, np.where(sd > 1e-12, sd, 1.0)


def fit_linear_classifier(xtr, ytr, xval, yval, n_classes, *, epochs, lr, momentum,
                          batch_size, seed):
    """SGD with momentum on softmax cross-entropy; keeps the best-val-top1 epoch."""
    rng = np.random.default_rng(seed)
    d = xtr.shape[1]
    w = rng.normal(0, 0.01, (d, n_classes))
    b = np.zeros(n_classes)
    vw, vb = np.zeros_like(w), np.zeros_like(b)
    best = (-1.0, w.copy(), b.copy(), 0)
    for epoch in range(epochs):
        order = rng.permutation(len(xtr))
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            p = _softmax(xtr[idx] @ w + b)
            p[np.arange(len(idx)), ytr[idx]] -= 1
            p /= len(idx)
            vw = momentum * vw + xtr[idx].T @ p
            vb = momentum * vb + p.sum(axis=0)
            w -= lr * vw
            b -= lr * vb
        acc = 100.0 * float(np.mean(np.argmax(xval @ w + b, axis=1) == yval))
        if acc > best[0]:
            best = (acc, w.copy(), b.copy(), epoch + 1)
    return best[1], best[2], best[3]


def fit_linear_regressor(xtr, ytr, xval, yval_raw, y_mu, y_sd, *, epochs, lr, weight_decay,
                         batch_size, seed):
    """AdamW on MSE of standardized targets; keeps the best-val-average-MAE epoch."""
    rng = np.random.default_rng(seed)
    d, k = xtr.shape[1], ytr.shape[1]
    params = {"w": rng.normal(0, 0.01, (d, k)), "b": np.zeros(k)}
    m = {n: np.zeros_like(p) for n, p in params.items()}
    v = {n: np.zeros_like(p) for n, p in params.items()}
    opt = TrainConfig(base_lr=lr, weight_decay=weight_decay)
    best = (np.inf, params["w"].copy(), params["b"].copy(), 0)
    t = 0
    for epoch in range(epochs):
        order = rng.permutation(len(xtr))
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            err = xtr[idx] @ params["w"] + params["b"] - ytr[idx]
            g = {"w": 2 * xtr[idx].T @ err / err.size, "b": 2 * err.sum(axis=0) / err.size}
            t += 1
            for n in params:
                trainer.adamw_update(params[n], g[n], m[n], v[n], t, lr, opt, n == "w")
        pred = (xval @ params["w"] + params["b"]) * y_sd + y_mu
        mae = float(np.abs(pred - yval_raw).mean())
        if mae < best[0]:
            best = (mae, params["w"].copy(), params["b"].copy(), epoch + 1)
    return best[1], best[2], best[3]


def probe_features(feats: dict, targets: dict, task: str, cfg: ProbeConfig) -> MetricsReport:
    """Train, select and test a linear head on precomputed split features.

    ``feats`` and ``targets`` map ``train``/``val``/``test`` to arrays.
    Features (and regression targets) are standardized with train statistics.
    """
    kind = synthdata.TASK_INFO[task][0]
    mu, sd = _standardizer(feats["train"])
    x = {k: (f - mu) / sd for k, f in feats.items()}
    if kind == "classify":
        # one output per class present in the data (a task may use a subset)
        n_out = int(max(t.max() for t in targets.values())) + 1
        w, b, epoch = fit_linear_classifier(
            x["train"], targets["train"], x["val"], targets["val"], n_out,
            epochs=cfg.classify_epochs, lr=cfg.classify_lr, momentum=cfg.classify_momentum,
            batch_size=cfg.batch_size, seed=cfg.seed)
        report = compute_metrics(x["test"] @ w + b, targets["test"], task)
    else:
        y_mu, y_sd = _standardizer(targets["train"])
        w, b, epoch = fit_linear_regressor(
            x["train"], (targets["train"] - y_mu) / y_sd, x["val"], targets["val"], y_mu, y_sd,
            epochs=cfg.regress_epochs, lr=cfg.regress_lr, weight_decay=cfg.regress_weight_decay,
            batch_size=cfg.batch_size, seed=cfg.seed)
        report = compute_metrics((x["test"] @ w + b) * y_sd + y_mu, targets["test"], task)
    report.seed = cfg.seed
    report.extra["best_epoch"] = epoch
    return report


def linear_probe(checkpoint, probe_cfg: ProbeConfig, dataset: synthdata.Dataset) -> MetricsReport:
    """Linear probe of a frozen encoder on ``dataset``'s train/val/test splits.

    ``checkpoint`` is a path or an in-memory :class:`~sarl.trainer.TrainState`.
    """
    if dataset.task != probe_cfg.task:
        raise TaskMismatchError(f"probe task {probe_cfg.task!r} but dataset holds {dataset.task!r}")
    state, ckpt_id = _as_state(checkpoint)
    before = frozen_checksum(state)
    feats, targets = {}, {}
    for split in ("train", "val", "test"):
        imgs, tg = dataset.subset(split)
        if len(imgs) == 0:
            raise ValueError(f"empty {split} split")
        feats[split] = extract_features(state, imgs)
        targets[split] = tg
    report = probe_features(feats, targets, dataset.task, probe_cfg)
    if frozen_checksum(state) != before:
        raise RuntimeError("encoder changed during probing")
    report.checkpoint = ckpt_id
    report.extra["encoder_checksum"] = before
    return report


# -- ablation matrix --------------------------------------------------------

@functools.lru_cache(maxsize=8)
def cached_dataset(task: str, n: int, seed: int, modality: str) -> synthdata.Dataset:
    if task == "pool":
        return synthdata.make_pretrain_pool(n, seed, modality)
    return synthdata.make_dataset(task, n, seed, modality)


def _cell_key(cfg: RunConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def run_cell(cfg: RunConfig, cell_dir, tasks=PROBE_TASKS) -> list[dict]:
    """Pretrain one model and probe it on ``tasks``; cached by config hash.

    The result is written to ``cell_dir/result.json``; a later call with the
    same configuration reads it back instead of retraining.
    """
    cell_dir = Path(cell_dir)
    key = _cell_key(cfg)
    result_path = cell_dir / "result.json"
    if result_path.is_file():
        cached = json.loads(result_path.read_text())
        if cached.get("key") == key and [r["task"] for r in cached["rows"]] == list(tasks):
            return cached["rows"]
    modality = resolve_modality(cfg.data.modality)
    pool = cached_dataset("pool", cfg.data.pool_size, cfg.data.seed, modality)
    start = time.time()
    state = trainer.pretrain(cfg.train, pool.images, cell_dir)
    train_time = time.time() - start
    _, final_std = final_projection_std(state, pool.images)
    rows = []
    for task in tasks:
        ds = cached_dataset(task, cfg.probe.n_samples, cfg.probe.data_seed, modality)
        rep = linear_probe(state, replace(cfg.probe, task=task, seed=cfg.train.seed), ds)
        mae = rep.mae or (None, None, None)
        rows.append({
            "subset": subset_name(cfg.train.losses), "modality": cfg.data.modality,
            "seed": cfg.train.seed, "task": task, "top1": rep.top1, "top5": rep.top5,
            "mae_0": mae[0], "mae_1": mae[1], "mae_2": mae[2], "avg_mae": rep.avg_mae,
            "checkpoint": str(cell_dir / "ckpt" / f"epoch_{state.epoch:04d}.npz"),
            "proj_std": final_std, "train_seconds": round(train_time, 1),
        })
    for r in rows:
        r["cell_seconds"] = round(time.time() - start, 1)
    cell_dir.mkdir(parents=True, exist_ok=True)
    tmp = cell_dir / "result.json.tmp"
    tmp.write_text(json.dumps({"key": key, "rows": rows}, indent=1))
    tmp.replace(result_path)
    return rows


def final_projection_std(state: trainer.TrainState, images, n=64, seed=0):
    """Mean per-dimension std of online projections over ``n`` augmented views."""
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(images), size=min(n, len(images)), replace=False))
    imgs = np.asarray(images)[idx].astype(np.float64) / 255
    p1, _ = trainer.sample_pairs(rng, len(imgs), imgs.shape[1:3], state.config)
    v = trainer.make_views(imgs, p1, state.config)
    pyr = encoder.forward(state.online, v, train=False, predictor=False,
                          buffers=state.online_buffers)
    std = pyr.proj.astype(np.float64).std(axis=0)
    return std, float(std.mean())


def cell_configs(base: RunConfig, loss_subsets, modality_modes, seeds) -> list[RunConfig]:
    cells = []
    for subset, mode, seed in itertools.product(loss_subsets, modality_modes, seeds):
        resolve_modality(mode)
        train = replace(base.train, losses=tuple(subset), seed=int(seed))
        cells.append(replace(base, train=train, data=replace(base.data, modality=mode)))
    return cells


def cell_dir_name(cfg: RunConfig) -> str:
    return f"{subset_name(cfg.train.losses)}__{cfg.data.modality}__s{cfg.train.seed}"


def _run_cell_args(args):
    cfg, path, tasks = args
    return run_cell(cfg, path, tasks)


def ablation_matrix(base_config: RunConfig, loss_subsets, modality_modes, seeds, out_dir, *,
                    jobs=1, tasks=PROBE_TASKS) -> list[dict]:
    """Pretrain and probe every (subset, modality, seed) cell.

    Writes ``results.csv`` and ``results_table.txt`` into ``out_dir`` and
    returns the CSV rows. Cells run in separate processes when ``jobs > 1``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = cell_configs(base_config, loss_subsets, modality_modes, seeds)
    args = [(c, out / "cells" / cell_dir_name(c), tuple(tasks)) for c in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell_args, args))
    else:
        results = [_run_cell_args(a) for a in args]
    rows = [r for rs in results for r in rs]
    write_results(rows, out / "results.csv")
    tmp = out / "results_table.txt.tmp"
    tmp.write_text(render_table(rows))
    tmp.replace(out / "results_table.txt")
    return rows


def write_results(rows, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r[k]) for k in CSV_FIELDS})
    os.replace(tmp, path)
    return path


def read_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    missing = set(CSV_FIELDS) - set(rows[0] if rows else CSV_FIELDS)
    if missing:
        raise ValueError(f"results file lacks columns {sorted(missing)}")
    for r in rows:
        for k in ("top1", "top5", "mae_0", "mae_1", "mae_2", "avg_mae"):
            r[k] = float(r[k]) if r[k] not in ("", None) else None
        r["seed"] = int(r["seed"])
    return rows


def summarize(rows) -> dict:
    """``{(subset, modality): {task: (mean, std, n)}}`` of each task's headline metric."""
    groups: dict = {}
    for r in rows:
        value = r["top1"] if r["top1"] is not None else r["avg_mae"]
        groups.setdefault((r["subset"], r["modality"]), {}).setdefault(r["task"], []).append(value)
    return {cell: {t: (float(np.mean(v)), float(np.std(v)), len(v)) for t, v in tasks.items()}
            for cell, tasks in groups.items()}


def render_table(rows) -> str:
    """Text table of mean ± std over seeds, ranked by edge-pose MAE when present."""
    summary = summarize(rows)
    tasks = sorted({t for cell in summary.values() for t in cell})

    def rank(item):
        stats = item[1]
        if "edge_pose" in stats:
            return stats["edge_pose"][0]
        if "shape" in stats:
            return -stats["shape"][0]
        return 0.0

    heads = ["losses", "modality", "seeds"] + [
        f"{t} {'top1 %' if synthdata.TASK_INFO[t][0] == 'classify' else 'avg MAE'}" for t in tasks]
    lines = []
    for (subset, mode), stats in sorted(summary.items(), key=rank):
        n = max(s[2] for s in stats.values())
        cells = [subset, mode, str(n)]
        for t in tasks:
            cells.append(f"{stats[t][0]:.3f} ± {stats[t][1]:.3f}" if t in stats else "-")
        lines.append(cells)
    widths = [max(len(h), *(len(l[i]) for l in lines)) if lines else len(h)
              for i, h in enumerate(heads)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    out = [fmt.format(*heads), fmt.format(*("-" * w for w in widths))]
    out += [fmt.format(*l) for l in lines]
    return "\n".join(out) + "\n"


# -- gradient checking ------------------------------------------------------

def finite_difference(f, x, h):
    """Central differences of scalar ``f()`` w.r.t. every element of ``x`` (in place)."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + h
        up = f()
        x[i] = orig - h
        down = f()
        x[i] = orig
        g[i] = (up - down) / (2 * h)
    return g


def relative_error(analytic, numeric, floor=1e-6) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``.

    Central differences carry a round-off error near ``eps * |loss| / h``
    (about 1e-11 here), so entries far below ``floor`` have no meaningful
    relative digits and are judged against the floor instead.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def _pyramid(rng, n, dtype, pred_dim=8):
    f2 = rng.standard_normal((n, 6, 6, 8)).astype(dtype)
    f3 = rng.standard_normal((n, 4, 4, 8)).astype(dtype)
    f4 = rng.standard_normal((n, 2, 2, 8)).astype(dtype)
    proj = rng.standard_normal((n, pred_dim)).astype(dtype)
    pred = rng.standard_normal((n, pred_dim)).astype(dtype)
    return encoder.FeaturePyramid(f2, f3, f4, f4.mean(axis=(1, 2)), proj, pred)


def gradcheck_inputs(seed=0, precision="float64", n=2):
    """Small random online/target pyramids, warps and a prototype bank."""
    dtype = np.dtype(precision)
    rng = np.random.default_rng(seed)
    on1, on2 = _pyramid(rng, n, dtype), _pyramid(rng, n, dtype)
    tg1, tg2 = _pyramid(rng, n, dtype), _pyramid(rng, n, dtype)
    warps = []
    for _ in range(n):
        # keep drawing until the two crops overlap enough to exercise every term
        while True:
            a = augment.sample_view_params(rng, (64, 64), 32)
            b = augment.sample_view_params(rng, (64, 64), 32)
            w = augment.warp_between(a, b)
            if augment.overlap_mask(w, (3, 3)).sum() >= 3:
                break
        warps.append(w)
    bank = PrototypeBank.random(5, 8, rng, tau=0.5, dtype=dtype)
    return on1, on2, tg1, tg2, warps, bank


def gradcheck_suite(precision="float64", h=1e-5, tolerance=1e-4, seed=0) -> dict:
    """Compare analytic and central-difference gradients of every loss term.

    Returns a JSON-ready report with each term's maximum relative error and
    pass flag, plus the stop-gradient checks on target-branch inputs.
    """
    start = time.time()
    on1, on2, tg1, tg2, warps, bank = gradcheck_inputs(seed, precision)
    settings = LossSettings(ppda_grid=3, ram_grid=3)
    pinned = bank.vectors.copy()
    terms = {}

    v, g1, _ = global_loss(on1.pred, tg2.proj, on2.pred, tg1.proj)
    terms["global"] = relative_error(
        g1, finite_difference(lambda: global_loss(on1.pred, tg2.proj, on2.pred, tg1.proj)[0],
                              on1.pred, h))
    _, g, _ = sal_loss(on1.f2, tg2.f2, warps)
    terms["sal"] = relative_error(g, finite_difference(lambda: sal_loss(on1.f2, tg2.f2, warps)[0],
                                                       on1.f2, h))
    _, g, gb = ppda_loss(on1.f3, tg2.f3, bank, 3, pinned)
    terms["ppda_features"] = relative_error(
        g, finite_difference(lambda: ppda_loss(on1.f3, tg2.f3, bank, 3, pinned)[0], on1.f3, h))
    terms["ppda_prototypes"] = relative_error(
        gb, finite_difference(lambda: ppda_loss(on1.f3, tg2.f3, bank, 3, pinned)[0],
                              bank.vectors, h))
    _, g, _ = ram_loss(on1.f3, tg2.f3, warps, 3)
    terms["ram"] = relative_error(g, finite_difference(lambda: ram_loss(on1.f3, tg2.f3, warps, 3)[0],
                                                       on1.f3, h))

    def total():
        return combined_loss(on1, on2, tg1, tg2, warps, bank, settings)[0].total

    _, grads = combined_loss(on1, on2, tg1, tg2, warps, bank, settings)
    worst = 0.0
    for name, pyr in (("online1", on1), ("online2", on2)):
        for key in ("pred", "f2", "f3", "f4"):
            worst = max(worst, relative_error(grads[name][key],
                                              finite_difference(total, getattr(pyr, key), h)))
    terms["combined"] = worst

    report = {
        "precision": precision, "h": h, "tolerance": tolerance,
        "terms": {k: {"max_rel_error": e, "passed": bool(e < tolerance)} for k, e in terms.items()},
        "stop_gradient": stop_gradient_check(seed, precision),
    }
    report["passed"] = bool(all(t["passed"] for t in report["terms"].values())
                            and all(t["passed"] for t in report["stop_gradient"].values()))
    report["seconds"] = round(time.time() - start, 3)
    return report


def stop_gradient_check(seed=0, precision="float64", eps=1e-3) -> dict:
    """Per term: target gradients are exactly zero yet perturbing targets moves the value."""
    on1, on2, tg1, tg2, warps, bank = gradcheck_inputs(seed, precision)
    settings = LossSettings(ppda_grid=3, ram_grid=3)
    rng = np.random.default_rng(seed + 1)
    base, grads = combined_loss(on1, on2, tg1, tg2, warps, bank, settings)
    zero = all(np.all(g == 0) for side in ("target1", "target2") for g in grads[side].values())
    fields_for = {"global": ("proj",), "sal": ("f2", "f3", "f4"), "ppda": ("f3",), "ram": ("f3",)}
    out = {}
    for term, keys in fields_for.items():
        saved = {k: (getattr(tg1, k).copy(), getattr(tg2, k).copy()) for k in keys}
        for k in keys:
            for pyr in (tg1, tg2):
                arr = getattr(pyr, k)
                arr += eps * rng.standard_normal(arr.shape)
        moved, _ = combined_loss(on1, on2, tg1, tg2, warps, bank, settings)
        for k, (a, b) in saved.items():
            setattr(tg1, k, a)
            setattr(tg2, k, b)
        attr = "global_" if term == "global" else term
        delta = abs(getattr(moved, attr) - getattr(base, attr))
        out[term] = {"target_grad_zero": bool(zero), "value_change": float(delta),
                     "passed": bool(zero and delta > 0)}
    return out


# -- multipool fine-tune ----------------------------------------------------

@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 30
    lr: float = 1e-2
    weight_decay: float = 1e-4
    batch_size: int = 64
    freeze_stage4: bool = False
    seed: int = 0


@dataclass
class FinetuneResult:
    report: MetricsReport
    params: dict
    buffers: dict


def _pooled(f3, f4):
    return np.concatenate([f3.mean(axis=(1, 2)), f4.mean(axis=(1, 2))], axis=1)


def multipool_finetune(checkpoint, dataset: synthdata.Dataset,
                       config: FinetuneConfig = FinetuneConfig()) -> FinetuneResult:
    """Train stage 4 and a fresh head on concatenated pooled stage-3/stage-4 features.

    Stages up to 3 stay frozen (their maps are computed once in eval mode).
    With ``freeze_stage4`` the protocol degenerates to a linear head on the
    concatenated frozen features. The learning rate follows a cosine schedule.
    """
    state, ckpt_id = _as_state(checkpoint)
    kind, n_classes = synthdata.TASK_INFO[dataset.task]
    if kind != "classify":
        raise TaskMismatchError("multipool fine-tuning needs class labels")
    params = {k: v.copy() for k, v in state.online.items()}
    buffers = {k: v.copy() for k, v in state.online_buffers.items()}
    dtype = params["s4.c1.w"].dtype
    f3, y = {}, {}
    for split in ("train", "val", "test"):
        imgs, y[split] = dataset.subset(split)
        f3[split] = extract_features(state, imgs, layer="f3").astype(dtype)

    rng = np.random.default_rng(config.seed)
    dim = f3["train"].shape[-1] + params["s4.c2.w"].shape[-1]
    head = {"w": rng.normal(0, 0.01, (dim, n_classes)), "b": np.zeros(n_classes)}
    trainable = {"head.w": head["w"], "head.b": head["b"]}
    if not config.freeze_stage4:
        trainable.update({k: params[k] for k in params if k.startswith("s4.")})
    m = {k: np.zeros_like(v) for k, v in trainable.items()}
    v = {k: np.zeros_like(v) for k, v in trainable.items()}
    opt = TrainConfig(base_lr=config.lr, weight_decay=config.weight_decay, lr_schedule="cosine")
    n = len(f3["train"])
    steps = config.epochs * math.ceil(n / config.batch_size)

    def logits(x3, train):
        # in training mode this also advances the block's running statistics
        f4, cache = encoder.stage4_forward(params, x3, train=train, buffers=buffers)
        feats = _pooled(x3.astype(np.float64), f4.astype(np.float64))
        return feats @ head["w"] + head["b"], feats, f4, cache

    def evaluate(split):
        return logits(f3[split], False)[0]

    best = (-1.0, None)
    t = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            if len(idx) < 2:
                continue
            train_mode = not config.freeze_stage4
            z, feats, f4, cache = logits(f3["train"][idx], train_mode)
            p = _softmax(z)
            p[np.arange(len(idx)), y["train"][idx]] -= 1
            p /= len(idx)
            grads = {"head.w": feats.T @ p, "head.b": p.sum(axis=0)}
            if train_mode:
                dfeat = p @ head["w"].T
                c3 = f3["train"].shape[-1]
                hw = f4.shape[1] * f4.shape[2]
                d4 = np.broadcast_to(dfeat[:, None, None, c3:] / hw, f4.shape).astype(dtype)
                grads.update(encoder.stage4_backward(params, cache, d4))
            lr = trainer.learning_rate(opt, t, steps)
            t += 1
            for k, arr in trainable.items():
                trainer.adamw_update(arr, grads[k].astype(arr.dtype), m[k], v[k], t, lr, opt,
                                     not k.endswith(".b") and not k.endswith(".g"))
        acc = compute_metrics(evaluate("val"), y["val"], dataset.task).top1
        if acc > best[0]:
            best = (acc, ({k: a.copy() for k, a in params.items()},
                          {k: a.copy() for k, a in buffers.items()},
                          {k: a.copy() for k, a in head.items()}))
    if best[1] is not None:
        params, buffers, head = (dict(x) for x in best[1])
    report = compute_metrics(evaluate("test"), y["test"], dataset.task)
    report.seed = config.seed
    report.checkpoint = ckpt_id
    report.extra["val_top1"] = best[0]
    return FinetuneResult(report, params, buffers)
