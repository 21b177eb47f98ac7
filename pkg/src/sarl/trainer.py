"""Pretraining loop: two views, two branches, combined loss, AdamW, EMA."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import augment, encoder
from .config import TrainConfig
from .losses import LossReport, LossSettings, PrototypeBank, combined_loss

logger = logging.getLogger(__name__)

CKPT_VERSION = 1
COLLAPSE_THRESHOLD = 1e-3


class NonFiniteLossError(FloatingPointError):
    def __init__(self, msg, bundle=None):
        super().__init__(msg)
        self.bundle = bundle


def encoder_config(cfg: TrainConfig) -> encoder.EncoderConfig:
    return encoder.EncoderConfig(cfg.input_size, cfg.stage_channels, cfg.stage_channels[3],
                                 cfg.proj_dim, cfg.predictor_init)


def loss_settings(cfg: TrainConfig) -> LossSettings:
    return LossSettings(cfg.lambdas, cfg.ppda_grid, cfg.ram_grid, cfg.symmetrize_spatial)


@dataclass
class TrainState:
    config: TrainConfig
    online: dict
    target: dict
    online_buffers: dict
    target_buffers: dict
    bank: PrototypeBank
    m: dict
    v: dict
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0

    def checksum(self, which="target") -> str:
        import hashlib
        h = hashlib.sha256()
        for k, a in sorted(getattr(self, which).items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def init_state(cfg: TrainConfig) -> TrainState:
    dtype = np.dtype(cfg.dtype)
    ecfg = encoder_config(cfg)
    ss = np.random.SeedSequence(cfg.seed)
    s_params, s_bank, s_loop = ss.spawn(3)
    online = encoder.init_params(ecfg, int(s_params.generate_state(1)[0]), dtype)
    target = {k: v.copy() for k, v in online.items()}
    bank = PrototypeBank.random(cfg.n_prototypes, cfg.stage_channels[2],
                                np.random.default_rng(s_bank), cfg.tau, dtype)
    m = {k: np.zeros_like(v) for k, v in online.items()}
    v = {k: np.zeros_like(v) for k, v in online.items()}
    m["__bank__"] = np.zeros_like(bank.vectors)
    v["__bank__"] = np.zeros_like(bank.vectors)
    return TrainState(cfg, online, target, encoder.init_buffers(ecfg, dtype),
                      encoder.init_buffers(ecfg, dtype), bank, m, v,
                      np.random.default_rng(s_loop))


def learning_rate(cfg: TrainConfig, step: int, total_steps: int) -> float:
    if cfg.lr_schedule == "cosine" and total_steps > 0:
        return cfg.base_lr * 0.5 * (1 + math.cos(math.pi * min(step, total_steps) / total_steps))
    return cfg.base_lr


def adamw_update(p, g, m, v, t, lr, cfg: TrainConfig, decay: bool):
    """One decoupled-weight-decay Adam update, in place on ``p, m, v``."""
    b1, b2 = cfg.beta1, cfg.beta2
    if decay and cfg.weight_decay:
        p *= 1 - lr * cfg.weight_decay
    m *= b1
    m += (1 - b1) * g
    v *= b2
    v += (1 - b2) * g * g
    mhat = m / (1 - b1 ** t)
    vhat = v / (1 - b2 ** t)
    p -= lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)


def collapse_monitor(embeddings) -> tuple[np.ndarray, bool]:
    """Per-dimension std across the batch, and whether its mean signals collapse."""
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] < 8:
        raise ValueError("need a batch of at least 8 embeddings")
    std = e.std(axis=0)
    return std, bool(std.mean() < COLLAPSE_THRESHOLD)


def make_views(images, params_list, cfg: TrainConfig) -> np.ndarray:
    mean = cfg.norm_mean if cfg.norm_mean is not None else None
    std = cfg.norm_std if cfg.norm_std is not None else None
    out = np.stack([augment.apply_view(img, p, mean, std) for img, p in zip(images, params_list)])
    return out.astype(cfg.dtype)


def sample_pairs(rng, n, source_size, cfg: TrainConfig):
    p1, p2 = [], []
    for _ in range(n):
        p1.append(augment.sample_view_params(rng, source_size, cfg.input_size, cfg.jitter))
        p2.append(augment.sample_view_params(rng, source_size, cfg.input_size, cfg.jitter))
    return p1, p2


def identity_pairs(rng, n, source_size, cfg: TrainConfig):
    """Both views equal the plain resized image; useful for sanity checks."""
    p = augment.ViewParams.identity(source_size, cfg.input_size)
    return [p] * n, [p] * n


def train_step(state: TrainState, batch, *, view_sampler=sample_pairs, total_steps=0,
               repro_dir=None) -> tuple[LossReport, dict]:
    """One optimizer + EMA step on a batch of source images ``(N, H, W, 3)``.

    ``batch`` may be uint8 (0..255) or float in ``[0, 1]``. Returns the loss
    report and step diagnostics (view parameters, projection std).
    """
    cfg = state.config
    images = np.asarray(batch)
    if images.dtype == np.uint8:
        images = images.astype(np.float64) / 255
    n = images.shape[0]
    p1, p2 = view_sampler(state.rng, n, images.shape[1:3], cfg)
    v1 = make_views(images, p1, cfg)
    v2 = make_views(images, p2, cfg)
    warps = [augment.warp_between(a, b) for a, b in zip(p1, p2)]

    on1 = encoder.forward(state.online, v1, buffers=state.online_buffers)
    on2 = encoder.forward(state.online, v2, buffers=state.online_buffers)
    tg1 = encoder.forward(state.target, v1, predictor=False, buffers=state.target_buffers)
    tg2 = encoder.forward(state.target, v2, predictor=False, buffers=state.target_buffers)
    report, grads = combined_loss(on1, on2, tg1, tg2, warps, state.bank, loss_settings(cfg))
    if not np.isfinite(report.total):
        bundle = None
        if repro_dir is not None:
            bundle = Path(repro_dir) / f"nonfinite_step{state.step:06d}.npz"
            np.savez(bundle, images=images, views1=v1, views2=v2,
                     params=json.dumps([[a.to_dict(), b.to_dict()] for a, b in zip(p1, p2)]))
        raise NonFiniteLossError(f"non-finite loss at step {state.step}: {report.to_dict()}", bundle)

    g1, _ = encoder.backward(state.online, on1, grads["online1"])
    g2, _ = encoder.backward(state.online, on2, grads["online2"])
    t = state.step + 1
    lr = learning_rate(cfg, state.step, total_steps)
    for k, p in state.online.items():
        adamw_update(p, (g1[k] + g2[k]).astype(p.dtype), state.m[k], state.v[k], t, lr, cfg, True)
    adamw_update(state.bank.vectors, grads["bank"].astype(state.bank.vectors.dtype),
                 state.m["__bank__"], state.v["__bank__"], t, lr, cfg, False)
    state.bank.renormalize()
    state.target = encoder.ema_blend(state.online, state.target, cfg.momentum)
    state.step = t
    std, alarm = collapse_monitor(on1.proj) if n >= 8 else (on1.proj.std(axis=0), False)
    return report, {"views": (p1, p2), "proj_std": float(std.mean()), "collapse": alarm}


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for group in ("online", "target", "online_buffers", "target_buffers", "m", "v"):
        for k, a in getattr(state, group).items():
            arrays[f"{group}/{k}"] = a
    arrays["bank"] = state.bank.vectors
    meta = {
        "version": CKPT_VERSION, "step": state.step, "epoch": state.epoch,
        "tau": state.bank.tau, "config": state.config.to_dict(),
        "rng": state.rng.bit_generator.state,
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> TrainState:
    with np.load(Path(path)) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta["version"] != CKPT_VERSION:
            raise ValueError(f"checkpoint version {meta['version']} != {CKPT_VERSION}")
        groups = {g: {} for g in ("online", "target", "online_buffers", "target_buffers", "m", "v")}
        for key in z.files:
            if "/" in key:
                g, name = key.split("/", 1)
                groups[g][name] = z[key].copy()
        bank = PrototypeBank(z["bank"].copy(), meta["tau"])
    cfg = TrainConfig(**meta["config"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return TrainState(cfg, groups["online"], groups["target"], groups["online_buffers"],
                      groups["target_buffers"], bank, groups["m"], groups["v"], rng,
                      meta["step"], meta["epoch"])


# -- loop -------------------------------------------------------------------

def channel_stats(images) -> tuple[tuple, tuple]:
    x = np.asarray(images, dtype=np.float64).reshape(-1, 3)
    if np.asarray(images).dtype == np.uint8:
        x = x / 255
    return tuple(float(a) for a in x.mean(axis=0)), tuple(float(a) for a in x.std(axis=0))


def with_norm_stats(cfg: TrainConfig, images) -> TrainConfig:
    if cfg.norm_mean is not None:
        return cfg
    mean, std = channel_stats(images)
    return replace(cfg, norm_mean=mean, norm_std=std)


def _append(fh, record):
    if fh is not None:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def pretrain(cfg: TrainConfig, images, run_dir=None, *, resume=None,
             view_sampler=sample_pairs, stop_after_epoch=None) -> TrainState:
    """Train for ``cfg.epochs`` over ``images`` (uint8 ``(N, H, W, 3)``).

    Writes ``ckpt/epoch_####.npz``, ``metrics.log`` and (optionally)
    ``augment_replay.log`` under ``run_dir``. ``resume`` continues from a
    checkpoint path; the result is bit-identical to an uninterrupted run.
    """
    images = np.asarray(images)
    n = len(images)
    if resume is not None:
        state = load_checkpoint(resume)
        cfg = state.config
    else:
        cfg = with_norm_stats(cfg, images)
        state = init_state(cfg)
    steps_per_epoch = n // cfg.batch_size
    total = steps_per_epoch * cfg.epochs
    run = Path(run_dir) if run_dir is not None else None
    metrics = replay = None
    if run is not None:
        (run / "ckpt").mkdir(parents=True, exist_ok=True)
        metrics = open(run / "metrics.log", "a")
        if cfg.log_augment:
            replay = open(run / "augment_replay.log", "a")
    try:
        if cfg.epochs == 0 and run is not None:
            save_checkpoint(state, run / "ckpt" / "epoch_0000.npz")
        while state.epoch < cfg.epochs:
            order = state.rng.permutation(n)
            for b in range(steps_per_epoch):
                idx = np.sort(order[b * cfg.batch_size:(b + 1) * cfg.batch_size])
                report, info = train_step(state, images[idx], view_sampler=view_sampler,
                                          total_steps=total, repro_dir=run)
                rec = {"step": state.step, "epoch": state.epoch + 1, **report.to_dict(),
                       "proj_std": info["proj_std"], "collapse": info["collapse"]}
                _append(metrics, rec)
                if replay is not None:
                    p1, p2 = info["views"]
                    for i, a, c in zip(idx, p1, p2):
                        _append(replay, {"step": state.step, "index": int(i),
                                         "view1": a.to_dict(), "view2": c.to_dict()})
                if state.step % 50 == 0:
                    logger.info("step %d total %.4f global %.4f", state.step, report.total, report.global_)
            state.epoch += 1
            if run is not None:
                save_checkpoint(state, run / "ckpt" / f"epoch_{state.epoch:04d}.npz")
            if stop_after_epoch is not None and state.epoch >= stop_after_epoch:
                break
    finally:
        for fh in (metrics, replay):
            if fh is not None:
                fh.close()
    return state
