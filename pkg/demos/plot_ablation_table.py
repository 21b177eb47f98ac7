r"""
Loss-subset ablation at toy scale
=================================

Run a miniature ablation matrix (every subset of the three spatial losses,
one seed) and print the summary table. The desk-scale matrix used by the
acceptance suite is the same call with ``configs/desk_scale.json``.
"""
from itertools import combinations
from pathlib import Path

from sarl import evaluate as ev
from sarl.config import DataConfig, ProbeConfig, RunConfig, TrainConfig

base = RunConfig(
    train=TrainConfig(epochs=2, batch_size=32, stage_channels=(8, 8, 16, 32), proj_dim=16,
                      n_prototypes=8, log_augment=False),
    data=DataConfig(pool_size=128),
    probe=ProbeConfig(n_samples=120, classify_epochs=30, regress_epochs=30),
)
subsets = [c for k in range(4) for c in combinations(("sal", "ppda", "ram"), k)]
rows = ev.ablation_matrix(base, subsets, ["fused"], [0], Path(__file__).with_name("out") / "ablation")
print(ev.render_table(rows))
