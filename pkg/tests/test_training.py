import numpy as np
import pytest

from lrcnet import autodiff as ad
from lrcnet import model as mdl
from lrcnet import training as tr
from lrcnet.config import ConfigError, RunConfig, TrainConfig, tiny_config
from lrcnet.dataio import make_dataset, segment_part_sets


def tiny_run(task="classify", epochs=1, seed=0, **model_kw):
    kw = dict(num_parts=5) if task == "segment" else {}
    kw.update(model_kw)
    return RunConfig(model=tiny_config(task=task, **kw), train=TrainConfig(epochs=epochs), seed=seed)


@pytest.fixture(scope="module")
def cls_data():
    return make_dataset("classify", 32, 64, 0.01, 1), make_dataset("classify", 8, 64, 0.01, 2)


class TestAdam:
    def test_step_one(self):
        p = {"w": np.array([1.0, -2.0, 3.0])}
        g = {"w": np.array([0.5, -4.0, 2e-3])}
        tr.adam_step(p, g, tr.OptimState(), 1e-3)
        np.testing.assert_allclose(p["w"], [1.0 - 1e-3, -2.0 + 1e-3, 3.0 - 1e-3], rtol=0, atol=1e-8)

    def test_zero_grad(self):
        p = {"w": np.array([1.0, 2.0])}
        st = tr.OptimState()
        for _ in range(3):
            tr.adam_step(p, {"w": np.zeros(2)}, st, 1e-3)
        assert p["w"].tolist() == [1.0, 2.0] and st.step == 3

    def test_matches_reference(self, rng):
        p = {"w": rng.standard_normal(4)}
        ref = p["w"].copy()
        m = v = np.zeros(4)
        st = tr.OptimState()
        for t in range(1, 6):
            g = rng.standard_normal(4)
            tr.adam_step(p, {"w": g}, st, 0.01)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p["w"], ref, rtol=1e-13)

    def test_nan_aborts(self):
        p = {"w": np.ones(2)}
        with pytest.raises(tr.TrainingError, match="w"):
            tr.adam_step(p, {"w": np.array([np.nan, 0.0])}, tr.OptimState(), 1e-3)
        assert p["w"].tolist() == [1.0, 1.0]


@pytest.mark.parametrize("epoch,lr", [(0, 1e-3), (19, 1e-3), (20, 3e-4), (40, 9e-5), (400, 1e-5)])
def test_lr_schedule(epoch, lr):
    assert tr.lr_schedule(epoch) == pytest.approx(lr, rel=1e-12)


class TestMetrics:
    def test_identity(self, rng):
        for _ in range(20):
            t = rng.integers(0, 3, 50)
            _, inst, shapes = tr.mean_iou([t], [t], [0], {0: [0, 1, 2]})
            assert inst == 1.0 and shapes == [1.0]

    def test_half_split(self):
        truth = np.array([0, 0, 1, 1])
        assert tr.part_ious(np.zeros(4, int), truth, [0, 1]) == [0.5, 0.0]
        _, inst, _ = tr.mean_iou([np.zeros(4, int)], [truth], [0], {0: [0, 1]})
        assert inst == 0.25

    def test_absent_part(self):
        t = np.array([0, 0, 1, 1, 0])
        cat, inst, _ = tr.mean_iou([t], [t], [3], {3: [0, 1, 2]})
        assert inst == 1.0 and cat == {3: 1.0}

    def test_label_outside_set(self):
        with pytest.raises(ValueError):
            tr.part_ious(np.array([0, 5]), np.array([0, 1]), [0, 1])

    def test_category_vs_instance(self):
        preds = [np.array([0, 0]), np.array([0, 1]), np.array([3, 3])]
        truths = [np.array([0, 1]), np.array([0, 1]), np.array([3, 3])]
        cat, inst, shapes = tr.mean_iou(preds, truths, [0, 0, 1], {0: [0, 1], 1: [3, 4]})
        assert shapes == [0.25, 1.0, 1.0]
        assert cat == {0: 0.625, 1: 1.0}
        assert inst == pytest.approx(2.25 / 3, abs=1e-15)

    def test_accuracy_manual(self, rng):
        p, t = rng.integers(0, 4, 32), rng.integers(0, 4, 32)
        assert tr.accuracy(p, t) == sum(int(a == b) for a, b in zip(p, t)) / 32


class TestTrain:
    def test_two_steps(self, cls_data):
        res = tr.train(cls_data[0], cls_data[1], tiny_run())
        assert res.steps == 2 and res.checkpoint.step == 2 and len(res.history) == 1

    def test_partial_batch_kept(self, cls_data):
        res = tr.train(cls_data[0][:20], [], tiny_run())
        assert res.steps == 2

    def test_deterministic(self, cls_data):
        a = tr.train(*cls_data, tiny_run(epochs=2))
        b = tr.train(*cls_data, tiny_run(epochs=2))
        assert a.log_text() == b.log_text()
        assert mdl.checkpoint_bytes(a.checkpoint) == mdl.checkpoint_bytes(b.checkpoint)
        assert len(a.log_text().splitlines()[0].split("\t")) == 4

    @pytest.mark.parametrize("seed", range(5))
    def test_descent(self, cls_data, seed):
        cfg = tiny_config()
        params = mdl.init_params(cfg, seed)
        batch = cls_data[0][:16]
        coords = np.stack([c.coords for c in batch])
        targets = np.array([c.class_id for c in batch])
        with ad.Tape() as tape:
            loss = mdl.loss_fn(mdl.forward(coords, cfg, params), targets)
        grads = tape.backward(loss, list(params.values()))
        arrays = {k: t.data for k, t in params.items()}
        tr.adam_step(arrays, dict(zip(params, grads)), tr.OptimState(), 1e-4)
        after = mdl.loss_fn(mdl.forward(coords, cfg, params), targets)
        assert float(after.data) < float(loss.data)

    def test_segment_log_has_miou(self):
        data = make_dataset("segment", 4, 64, 0.01, 1)
        res = tr.train(data, data, tiny_run("segment"), segment_part_sets())
        fields = res.history[0].line().split("\t")
        assert len(fields) == 5 and 0 <= float(fields[4]) <= 1

    def test_class_mismatch(self, cls_data):
        with pytest.raises(tr.TrainingError):
            tr.train(cls_data[0], [], tiny_run(num_classes=2))

    def test_empty(self):
        with pytest.raises(tr.TrainingError):
            tr.train([], [], tiny_run())

    def test_target_metric_stops(self, cls_data):
        run = tiny_run(epochs=5)
        run.train.target_metric = 1e-9
        assert len(tr.train(*cls_data, run).history) == 1

    def test_eval_report(self, cls_data):
        cfg = tiny_config()
        rep = tr.evaluate(cls_data[1], cfg, mdl.init_params(cfg))
        assert 0 <= rep.accuracy <= 1 and rep.lines()[0].startswith("instance accuracy")

    def test_predict_restricted_to_part_set(self):
        data = make_dataset("segment", 2, 64, 0.01, 1)
        cfg = tiny_config(task="segment", num_parts=5)
        preds = tr.predict(data, cfg, mdl.init_params(cfg), part_sets=segment_part_sets())
        for c, p in zip(data, preds):
            assert set(p.tolist()) <= set(segment_part_sets()[c.class_id])


class TestSweep:
    def test_single_entry_equals_train(self, cls_data):
        run = tiny_run()
        rows = tr.sweep(*cls_data, run, {"gamma": [1.0]})
        res = tr.train(*cls_data, run)
        assert len(rows) == 1 and rows[0].metric == res.history[0].test_acc

    def test_grid_rows_ranked(self, cls_data):
        rows = tr.sweep(*cls_data, tiny_run(), {"aggregation": ["intra", "mean", "max", "concat"]})
        assert sorted(r.label() for r in rows) == sorted(f"aggregation={x}" for x in ("All", "Mean", "Max", "Con"))
        metrics = [r.metric for r in rows]
        assert metrics == sorted(metrics, reverse=True)
        table = tr.format_sweep(rows)
        assert len(table.splitlines()) == 5 and table.startswith("rank\tconfig\ttest_acc")

    def test_scales_resets_filter_kinds(self):
        run = tr.apply_settings(tiny_run(), {"scales": (8,)})
        assert run.model.filter_kinds == 1

    def test_empty_grid(self, cls_data):
        with pytest.raises(ConfigError):
            tr.sweep(*cls_data, tiny_run(), {})
