"""Split training numerics: gradients, evaluation, partitioning, poisoning."""

import numpy as np
import pytest

from zksplit import trainer as tr
from zksplit.errors import ConfigError
from zksplit.modelcore import ParamVector


@pytest.fixture
def arch():
    return tr.ArchSpec(d_in=10, h1=6, h2=8, classes=3)


def full_loss(arch, wh, bh, wt, bt, state, x, y):
    _, a0 = tr.head_forward(wh, bh, x)
    _, a2 = tr.backbone_forward(state, a0)
    logits = tr.tail_forward(wt, bt, a2)
    loss, _ = tr.loss_and_dlogits(logits, y)
    return loss


class TestGradients:
    def test_finite_difference_agreement(self, arch, nprng):
        pv = tr.init_client_params(arch, 1)
        bb = tr.init_backbone(arch, 2)
        x = nprng.uniform(0, 1, (5, arch.d_in))
        y = nprng.integers(0, arch.classes, 5)
        wh, bh, wt, bt = (a.copy() for a in tr.unpack_client(pv, arch))
        z0, a0 = tr.head_forward(wh, bh, x)
        cache, a2 = tr.backbone_forward(bb, a0)
        logits = tr.tail_forward(wt, bt, a2)
        _, dlog = tr.loss_and_dlogits(logits, y)
        dwt, dbt, da2 = tr.tail_backward(wt, a2, dlog)
        grads_bb, da0 = tr.backbone_backward(bb, cache, da2, cache["z2"])
        dwh, dbh = tr.head_backward(z0, x, da0)
        eps = 1e-6
        checks = [(wh, dwh), (bh, dbh), (wt, dwt), (bt, dbt),
                  (bb["w1"], grads_bb["w1"]), (bb["b1"], grads_bb["b1"]),
                  (bb["w2"], grads_bb["w2"]), (bb["b2"], grads_bb["b2"])]
        for arr, analytic in checks:
            flat = arr.reshape(-1)
            aflat = analytic.reshape(-1)
            idx = nprng.choice(flat.size, size=min(20, flat.size), replace=False)
            for i in idx:
                old = flat[i]
                flat[i] = old + eps
                lp = full_loss(arch, wh, bh, wt, bt, bb, x, y)
                flat[i] = old - eps
                lm = full_loss(arch, wh, bh, wt, bt, bb, x, y)
                flat[i] = old
                num = (lp - lm) / (2 * eps)
                denom = max(abs(num) + abs(aflat[i]), 1e-8)
                assert abs(num - aflat[i]) / denom <= 1e-4


class TestTrainRound:
    def test_zero_epochs_noop(self, arch, nprng):
        pv = tr.init_client_params(arch, 3)
        bb = tr.init_backbone(arch, 4)
        shard = tr.DataShard(x=nprng.uniform(0, 1, (20, arch.d_in)),
                             y=nprng.integers(0, arch.classes, 20).astype(np.int64),
                             owner=0, iid_degree=1.0, main_label=0)
        out, _ = tr.train_round(pv, bb, shard, None, tr.Hyper(epochs=0), arch, seed=5)
        assert out == pv

    def test_two_class_separable_task(self):
        # linearly separable 2-class problem: MA >= 95% after 5 epochs
        arch = tr.ArchSpec(d_in=8, h1=6, h2=8, classes=2)
        rng = np.random.default_rng(0)
        n = 400
        y = rng.integers(0, 2, n)
        x = rng.normal(0.5, 0.08, (n, 8))
        x[:, 0] = 0.2 + 0.6 * y + rng.normal(0, 0.05, n)
        x = np.clip(x, 0, 1)
        shard = tr.DataShard(x=x, y=y.astype(np.int64), owner=0, iid_degree=1.0, main_label=0)
        pv = tr.init_client_params(arch, 7)
        bb = tr.init_backbone(arch, 8)
        pv, bb = tr.train_round(pv, bb, shard, None, tr.Hyper(lr=0.05, epochs=5), arch, seed=9)
        assert tr.evaluate(pv, bb, arch, x, y) >= 0.95

    def test_quantization_drift_small(self):
        arch = tr.ArchSpec()
        x, y = tr.make_blobs(5, 6, 1500)
        shard = tr.DataShard(x=x, y=y, owner=0, iid_degree=1.0, main_label=0)
        pv = tr.init_client_params(arch, 10)
        bb = tr.init_backbone(arch, 11)
        pv, bb = tr.train_round(pv, bb, shard, None, tr.Hyper(), arch, seed=12)
        tx, ty = tr.make_blobs(5, 7, 800)
        ma_quant = tr.evaluate(pv, bb, arch, tx, ty)
        # fresh float round-trip through the quantizer changes MA by <= 1 point
        requant = ParamVector.from_floats(pv.to_floats(), pv.frac_bits)
        ma_requant = tr.evaluate(requant, bb, arch, tx, ty)
        assert abs(ma_quant - ma_requant) <= 0.01


class TestEvaluate:
    def test_constant_target_predictor_has_ba_one(self, arch):
        # tail biased so strongly toward the target that predictions are constant
        wh = np.zeros((arch.h1, arch.d_in))
        bh = np.zeros(arch.h1)
        wt = np.zeros((arch.classes, arch.h1))
        bt = np.array([50.0] + [0.0] * (arch.classes - 1))
        pv = tr.pack_client(wh, bh, wt, bt)
        bb = tr.init_backbone(arch, 1)
        x = np.random.default_rng(2).uniform(0, 1, (60, arch.d_in))
        y = np.random.default_rng(3).integers(0, arch.classes, 60)
        spec = tr.PoisonSpec(target_label=0)
        assert tr.evaluate(pv, bb, arch, x, y, triggered=True, poison=spec) == 1.0

    def test_untrained_model_near_chance(self):
        arch = tr.ArchSpec()
        x, y = tr.make_blobs(21, 22, 2000)
        pv = tr.init_client_params(arch, 23)
        bb = tr.init_backbone(arch, 24)
        ma = tr.evaluate(pv, bb, arch, x, y)
        assert abs(ma - 0.1) <= 0.05

    def test_true_target_excluded_from_ba(self, arch, nprng):
        x = nprng.uniform(0, 1, (30, arch.d_in))
        y = np.zeros(30, dtype=np.int64)  # every label equals the target
        pv = tr.init_client_params(arch, 1)
        bb = tr.init_backbone(arch, 2)
        with pytest.raises(ConfigError):
            tr.evaluate(pv, bb, arch, x, y, triggered=True,
                        poison=tr.PoisonSpec(target_label=0))

    def test_empty_test_set(self, arch):
        pv = tr.init_client_params(arch, 1)
        bb = tr.init_backbone(arch, 2)
        with pytest.raises(ConfigError):
            tr.evaluate(pv, bb, arch, np.zeros((0, arch.d_in)), np.zeros(0, dtype=int))


class TestPartition:
    def test_fully_iid_matches_global_histogram(self):
        x, y = tr.make_blobs(31, 32, 5000)
        shards = tr.partition_dataset(x, y, 10, 1.0, seed=33)
        global_hist = np.bincount(y, minlength=10) / len(y)
        for s in shards:
            hist = np.bincount(s.y, minlength=10) / len(s.y)
            assert np.max(np.abs(hist - global_hist)) < 0.08

    def test_fully_non_iid_single_label(self):
        x, y = tr.make_blobs(41, 42, 3000)
        for s in tr.partition_dataset(x, y, 8, 0.0, seed=43):
            assert set(np.unique(s.y)) == {s.main_label}

    def test_partial_iid_fraction(self):
        x, y = tr.make_blobs(51, 52, 5000)
        shards = tr.partition_dataset(x, y, 10, 0.8, seed=53)
        for s in shards:
            # at least ~20% of the shard carries the main label
            frac_main = np.mean(s.y == s.main_label)
            assert frac_main >= 0.2 - 0.02

    def test_sizes_balanced_and_deterministic(self):
        x, y = tr.make_blobs(61, 62, 1003)
        a = tr.partition_dataset(x, y, 10, 0.5, seed=63)
        b = tr.partition_dataset(x, y, 10, 0.5, seed=63)
        sizes = sorted(len(s.y) for s in a)
        assert max(sizes) - min(sizes) <= 1
        assert sum(sizes) == 1003
        for sa, sb in zip(a, b):
            assert np.array_equal(sa.x, sb.x) and np.array_equal(sa.y, sb.y)


class TestPoisoning:
    def test_pdr_fraction_triggered(self, nprng):
        shard = tr.DataShard(x=nprng.uniform(0, 0.5, (100, 8)),
                             y=nprng.integers(1, 5, 100).astype(np.int64),
                             owner=0, iid_degree=1.0, main_label=1)
        spec = tr.PoisonSpec(trigger_indices=(0, 1), target_label=0, pdr=0.75)
        x, y = tr.poisoned_view(shard, spec, seed=4)
        triggered = np.all(x[:, :2] == 1.0, axis=1)
        assert triggered.sum() == 75
        assert np.all(y[triggered] == 0)
        assert np.all(y[~triggered] == shard.y[~triggered])

    def test_csv_ingestion(self, tmp_path):
        path = tmp_path / "tiny.csv"
        path.write_text("f0,f1,label\n0.1,0.2,1\n0.3,0.4,0\n")
        x, y = tr.load_csv_dataset(path)
        assert x.shape == (2, 2)
        assert list(y) == [1, 0]
