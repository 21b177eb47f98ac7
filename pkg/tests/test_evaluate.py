import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sarl import evaluate as ev, synthdata as sd, trainer
from sarl.config import DataConfig, ProbeConfig, RunConfig, TrainConfig


def brute_topk(scores, labels, k):
    hits = 0
    for s, y in zip(scores, labels):
        order = sorted(range(len(s)), key=lambda c: -s[c])
        # ties against the true class count as misses, as in compute_metrics
        better = sum(1 for c in range(len(s)) if s[c] > s[y])
        hits += better < k
    return 100.0 * hits / len(labels)


class TestMetrics:
    def test_perfect_classification(self):
        y = np.array([0, 3, 5, 1])
        rep = ev.compute_metrics(np.eye(6)[y], y, "shape")
        assert rep.top1 == 100.0 and rep.top5 == 100.0

    def test_half_correct(self):
        y = np.array([0, 1, 2, 3])
        scores = np.eye(6)[[0, 1, 4, 4]]
        assert ev.compute_metrics(scores, y, "shape").top1 == 50.0

    def test_regression_hand_sum(self):
        pred = np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0], [2.0, -1.0, 10.0]])
        lab = np.array([[0.5, 2.0, 1.0], [1.0, 1.0, 1.0], [2.0, 1.0, 4.0]])
        rep = ev.compute_metrics(pred, lab, "edge_pose")
        hand = [(0.5 + 1.0 + 0.0) / 3, (0.0 + 1.0 + 2.0) / 3, (2.0 + 1.0 + 6.0) / 3]
        np.testing.assert_allclose(rep.mae, hand)
        assert rep.avg_mae == pytest.approx(sum(hand) / 3)

    def test_perfect_regression(self, rng):
        y = rng.standard_normal((10, 3))
        rep = ev.compute_metrics(y, y, "force")
        assert rep.avg_mae == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="labels"):
            ev.compute_metrics(np.zeros((3, 6)), np.zeros(4, int), "shape")

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 9), st.integers(1, 40), st.integers(0, 2**31))
    def test_topk_matches_brute_force(self, k_classes, n, seed):
        r = np.random.default_rng(seed)
        scores = r.integers(0, 4, (n, k_classes)).astype(float)  # plenty of ties
        y = r.integers(0, k_classes, n)
        rep = ev.compute_metrics(scores, y, "shape")
        assert rep.top1 == pytest.approx(brute_topk(scores, y, 1))
        assert rep.top5 == pytest.approx(brute_topk(scores, y, min(5, k_classes)))
        assert 0 <= rep.top1 <= rep.top5 <= 100
        if k_classes <= 5:
            assert rep.top5 == 100.0 or np.any(scores == scores[np.arange(n), y][:, None])

    def test_top5_full_when_five_or_fewer_classes(self, rng):
        for k in range(2, 6):
            rep = ev.compute_metrics(rng.standard_normal((30, k)), rng.integers(0, k, 30), "shape")
            assert rep.top5 == 100.0

    def test_report_invariants(self):
        with pytest.raises(ValueError):
            ev.MetricsReport("shape", "classify", top1=60.0, top5=50.0)
        with pytest.raises(ValueError):
            ev.MetricsReport("force", "regress", mae=(-1.0, 0.0, 0.0), avg_mae=0.0)


@pytest.fixture(scope="module")
def shape_ds():
    return sd.make_dataset("shape", 120, seed=5)


@pytest.fixture(scope="module")
def default_state(shape_ds):
    cfg = trainer.with_norm_stats(TrainConfig(), shape_ds.images)
    return trainer.init_state(cfg)


FAST_PROBE = ProbeConfig(task="shape", classify_epochs=30, regress_epochs=30)


class TestLinearProbe:
    def test_frozen_checksum(self, default_state, shape_ds):
        before = ev.frozen_checksum(default_state)
        rep = ev.linear_probe(default_state, FAST_PROBE, shape_ds)
        assert ev.frozen_checksum(default_state) == before
        assert rep.extra["encoder_checksum"] == before

    def test_task_mismatch(self, default_state, shape_ds):
        with pytest.raises(ev.TaskMismatchError):
            ev.linear_probe(default_state, replace(FAST_PROBE, task="texture"), shape_ds)

    def test_overfit_single_batch(self, default_state, shape_ds):
        imgs, y = shape_ds.subset("train")
        imgs, y = imgs[:16], y[:16]
        ds = sd.Dataset("shape", np.concatenate([imgs] * 3), np.concatenate([y] * 3),
                        np.repeat(["train", "val", "test"], 16))
        rep = ev.linear_probe(default_state, replace(FAST_PROBE, classify_epochs=100), ds)
        assert rep.top1 == 100.0

    def test_random_encoder_near_chance(self):
        ds = sd.make_dataset("shape", 600, seed=99)
        cfg = trainer.with_norm_stats(TrainConfig(), ds.images)
        accs = [ev.linear_probe(trainer.init_state(replace(cfg, seed=s)), ProbeConfig(seed=s), ds).top1
                for s in range(3)]
        assert all(5.0 <= a <= 35.0 for a in accs), accs

    def test_regression_probe(self, default_state):
        ds = sd.make_dataset("edge_pose", 60, seed=1)
        rep = ev.linear_probe(default_state, replace(FAST_PROBE, task="edge_pose"), ds)
        assert rep.kind == "regress" and len(rep.mae) == 3 and rep.avg_mae > 0

    def test_missing_checkpoint(self, shape_ds, tmp_path):
        with pytest.raises(FileNotFoundError):
            ev.linear_probe(tmp_path / "nope.npz", FAST_PROBE, shape_ds)

    def test_seeded(self, default_state, shape_ds):
        a = ev.linear_probe(default_state, FAST_PROBE, shape_ds)
        b = ev.linear_probe(default_state, FAST_PROBE, shape_ds)
        assert a.to_dict() == b.to_dict()


class TestMultipool:
    def test_freeze_contract(self, default_state, shape_ds):
        res = ev.multipool_finetune(default_state, shape_ds, ev.FinetuneConfig(epochs=2))
        for k, v in default_state.online.items():
            if k.startswith(("stem", "s1.", "s2.", "s3.")):
                np.testing.assert_array_equal(res.params[k], v)
        assert any(not np.array_equal(res.params[k], default_state.online[k])
                   for k in default_state.online if k.startswith("s4."))
        assert 0 <= res.report.top1 <= 100

    def test_all_frozen_is_linear_readout(self, default_state, shape_ds):
        before = ev.frozen_checksum(default_state)
        res = ev.multipool_finetune(default_state, shape_ds,
                                    ev.FinetuneConfig(epochs=2, freeze_stage4=True))
        for k, v in default_state.online.items():
            np.testing.assert_array_equal(res.params[k], v)
        for k, v in default_state.online_buffers.items():
            np.testing.assert_array_equal(res.buffers[k], v)
        assert ev.frozen_checksum(default_state) == before

    def test_needs_classes(self, default_state):
        with pytest.raises(ev.TaskMismatchError):
            ev.multipool_finetune(default_state, sd.make_dataset("force", 20, seed=0))


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    base = RunConfig(
        train=TrainConfig(epochs=1, batch_size=16, stage_channels=(4, 8, 8, 16), proj_dim=8,
                          n_prototypes=4, log_augment=False),
        data=DataConfig(pool_size=32, seed=3),
        probe=ProbeConfig(n_samples=60, classify_epochs=5, regress_epochs=5))
    out = tmp_path_factory.mktemp("abl")
    rows = ev.ablation_matrix(base, [[], ["sal", "ppda", "ram"]], ["fused"], [0, 1], out)
    return base, out, rows



class TestAblation:
    def test_cells_and_files(self, tiny_run):
        _, out, rows = tiny_run
        assert len(rows) == 2 * 2 * 2
        assert {r["subset"] for r in rows} == {"global", "sal+ppda+ram"}
        back = ev.read_results(out / "results.csv")
        assert len(back) == 8
        table = (out / "results_table.txt").read_text()
        assert "global" in table and "±" in table

    def test_cached_cells_not_retrained(self, tiny_run):
        base, out, rows = tiny_run
        ckpt = out / "cells" / "global__fused__s0" / "ckpt" / "epoch_0001.npz"
        stamp = ckpt.stat().st_mtime_ns
        again = ev.ablation_matrix(base, [[]], ["fused"], [0], out)
        assert ckpt.stat().st_mtime_ns == stamp
        assert again == [r for r in rows if r["subset"] == "global" and r["seed"] == 0]

    def test_seed_isolation(self, tiny_run):
        _, out, _ = tiny_run
        a = np.load(out / "cells" / "global__fused__s0" / "ckpt" / "epoch_0001.npz")
        b = np.load(out / "cells" / "global__fused__s1" / "ckpt" / "epoch_0001.npz")
        assert not np.array_equal(a["online/stem.w"], b["online/stem.w"])
        meta_a = json.loads(bytes(a["meta"]).decode())
        meta_b = json.loads(bytes(b["meta"]).decode())
        assert meta_a["rng"]["state"] != meta_b["rng"]["state"]

    def test_subset_count(self):
        cells = ev.cell_configs(RunConfig(), [[], ["sal"], ["ppda"], ["ram"], ["sal", "ppda"],
                                              ["sal", "ram"], ["ppda", "ram"]], ["fused"], [0, 1, 2])
        assert len(cells) == 21
        assert cells[0].train.lambdas == {"sal": 0.0, "ppda": 0.0, "ram": 0.0}


class TestGradcheck:
    def test_too_tight_tolerance_fails(self):
        rep = ev.gradcheck_suite(tolerance=1e-12)
        assert not rep["passed"]
        assert any(not t["passed"] for t in rep["terms"].values())

    def test_relative_error_floor(self):
        assert ev.relative_error([1e-9], [2e-9]) < 1e-2
        assert ev.relative_error([1.0], [1.001]) == pytest.approx(1e-3, rel=1e-2)
