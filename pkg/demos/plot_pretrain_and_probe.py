r"""
Short pretraining run followed by a linear probe
================================================

Pretrain a small encoder for a few epochs on a synthetic pool, then freeze
it and fit linear heads for shape classification and edge-pose regression.
Runs in a couple of minutes on one CPU core.
"""
import json
from pathlib import Path

import numpy as np

from sarl import evaluate as ev, synthdata as sd, trainer
from sarl.config import ProbeConfig, TrainConfig

run = Path(__file__).with_name("out") / "pretrain"
pool = sd.make_pretrain_pool(256, seed=1)
cfg = TrainConfig(epochs=4, batch_size=32, stage_channels=(8, 16, 32, 64), proj_dim=32,
                  log_augment=False)
state = trainer.pretrain(cfg, pool.images, run)

log = [json.loads(l) for l in (run / "metrics.log").read_text().splitlines()]
for epoch in range(1, cfg.epochs + 1):
    recs = [r for r in log if r["epoch"] == epoch]
    print(f"epoch {epoch}: total {np.mean([r['total'] for r in recs]):.4f} "
          f"global {np.mean([r['global'] for r in recs]):.4f} "
          f"proj std {recs[-1]['proj_std']:.3f}")

# %%
# Probe the frozen encoder, and an untrained encoder for reference.
untrained = trainer.init_state(state.config)
for task in ("shape", "edge_pose"):
    ds = sd.make_dataset(task, 300, seed=9)
    probe = ProbeConfig(task=task, classify_epochs=50, regress_epochs=80)
    trained_rep = ev.linear_probe(state, probe, ds)
    random_rep = ev.linear_probe(untrained, probe, ds)
    print(f"{task}: pretrained {trained_rep.headline:.3f} | untrained {random_rep.headline:.3f}")
