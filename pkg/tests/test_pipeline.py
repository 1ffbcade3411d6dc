import numpy as np
import pytest

from rfpresence import pipeline, streamio, synth
from rfpresence.csi import CsiStream, StreamHeader
from rfpresence.model import save_model
from rfpresence.preprocess import PipelineVariant

from conftest import rand_window


def write_labeled_stream(path, rng, n_windows=4, label=0, day="d0", zero_every=None):
    n = n_windows * 128
    h = rand_window(rng, n, 14).astype(np.complex64)
    if zero_every:
        h[::zero_every, 0, 0, 0] = 0.0
    stream = CsiStream(
        header=StreamHeader(n_sc=14, n_r=3, n_t=3, label=label, day_id=day),
        timestamps_us=np.arange(n, dtype=np.int64) * 10000,
        h=h,
    )
    streamio.write_stream_file(path, [stream])
    return path


class TestBuildDataset:
    def test_window_count_nonoverlapping(self, tmp_path):
        rng = np.random.default_rng(0)
        p = write_labeled_stream(tmp_path / "a.csi", rng, n_windows=5)
        ds = pipeline.build_dataset([p], variant=PipelineVariant.WITH_DFT)
        assert ds.n == 5
        assert ds.inputs[0].shape == (5, 50, 14, 9)
        assert ds.inputs[1].shape == (5, 50, 14, 6)

    def test_alternating_zero_frames_reject_everything(self, tmp_path):
        rng = np.random.default_rng(1)
        p = write_labeled_stream(tmp_path / "z.csi", rng, n_windows=3, zero_every=2)
        with pytest.raises(pipeline.NoValidWindows):
            pipeline.build_dataset([p])

    def test_unlabeled_stream_rejected(self, tmp_path):
        rng = np.random.default_rng(2)
        p = write_labeled_stream(tmp_path / "u.csi", rng, n_windows=1, label=None)
        with pytest.raises(pipeline.UnlabeledStream):
            pipeline.build_dataset([p])

    def test_stride_one_counts(self, tmp_path):
        rng = np.random.default_rng(3)
        p = write_labeled_stream(tmp_path / "s.csi", rng, n_windows=2)  # 256 frames
        ws = pipeline.load_windows([p], stride=1)
        assert ws.n == 256 - 128 + 1

    def test_reject_counters(self, tmp_path):
        rng = np.random.default_rng(4)
        n = 4 * 128
        h = rand_window(rng, n, 14).astype(np.complex64)
        h[40, 0, 0, 0] = 0.0  # kills window 0 only
        ts = np.arange(n, dtype=np.int64) * 10000
        ts[3 * 128 + 64:] += 500_000  # gap inside window 3 stretches its span
        stream = CsiStream(
            header=StreamHeader(n_sc=14, n_r=3, n_t=3, label=0, day_id="d"),
            timestamps_us=ts, h=h,
        )
        p = tmp_path / "rej.csi"
        streamio.write_stream_file(p, [stream])
        ws = pipeline.load_windows([p])
        assert ws.n == 2
        assert ws.rejects == {"zero_entry": 1, "bad_span": 1}


class TestSplits:
    def make_dataset(self):
        rng = np.random.default_rng(5)
        n = 12
        return pipeline.Dataset(
            inputs=(rng.random((n, 4, 3, 2)).astype(np.float32),),
            labels=np.array([0, 1] * 6, dtype=np.int64),
            day_ids=np.array(["a", "a", "b", "b", "c", "c"] * 2),
            variant=PipelineVariant.MAG_ONLY,
        )

    def test_day_disjointness_enforced(self):
        ds = self.make_dataset()
        with pytest.raises(pipeline.PipelineError):
            ds.assign_splits(["a", "b"], ["b", "c"])

    def test_split_assignment(self):
        ds = self.make_dataset()
        ds.assign_splits(["a", "b"], ["c"])
        assert set(ds.day_ids[ds.splits["train"]]) == {"a", "b"}
        assert set(ds.day_ids[ds.splits["test"]]) == {"c"}
        assert len(ds.splits["train"]) + len(ds.splits["test"]) == ds.n

    def test_class_counts(self):
        ds = self.make_dataset()
        ds.assign_splits(["a", "b"], ["c"])
        assert ds.class_counts("train") == {0: 4, 1: 4}

    def test_subsample_reproducible(self):
        ds = self.make_dataset()
        s1 = ds.subsample(5, seed=3)
        s2 = ds.subsample(5, seed=3)
        assert np.array_equal(s1.inputs[0], s2.inputs[0])
        assert np.array_equal(s1.labels, s2.labels)
        s3 = ds.subsample(5, seed=4)
        assert not np.array_equal(s1.inputs[0], s3.inputs[0])

    def test_concat_counts(self):
        ds = self.make_dataset()
        both = ds.concat(ds.subsample(4, seed=0))
        assert both.n == 16
        with pytest.raises(pipeline.PipelineError):
            ds.concat(pipeline.Dataset(
                inputs=ds.inputs, labels=ds.labels, day_ids=ds.day_ids,
                variant=PipelineVariant.PHASE_ONLY,
            ))


class TestTrainEvaluate:
    def test_single_class_training_rejected(self, tmp_path):
        rng = np.random.default_rng(6)
        p = write_labeled_stream(tmp_path / "one.csi", rng, n_windows=4, label=0)
        ds = pipeline.build_dataset([p])
        ds.splits = {"train": np.arange(ds.n)}
        with pytest.raises(pipeline.SingleClassTrainingSet):
            pipeline.train(ds, seed=0)

    def test_all_zero_predictor_metrics(self, tiny_dataset_dir):
        files = sorted(tiny_dataset_dir.glob("*.csi"))
        ds = pipeline.build_dataset(files[:1])
        ds.splits = {"test": np.arange(ds.n)}
        spec = pipeline.spec_for_dataset(ds)
        from rfpresence.model import Model

        model = Model(spec, seed=0)
        model.head[-1].bias.value[...] = [50.0, 0.0]  # forces label 0 always
        result = pipeline.evaluate(model, ds, "test")
        m = result["overall"]
        assert m.accuracy == 0.5
        assert m.fpr == 0.0
        assert m.fnr == 1.0

    def test_metrics_equal_brute_force_recount(self, tiny_dataset_dir, tiny_model):
        files = sorted(tiny_dataset_dir.glob("*.csi"))
        ds = pipeline.build_dataset(files)
        ds.splits = {"test": np.arange(ds.n)}
        result = pipeline.evaluate(tiny_model, ds, "test")
        preds = pipeline.predict(tiny_model, ds.inputs)
        # independent recount, one sample at a time
        for day, m in result["days"].items():
            tp = fp = tn = fn = 0
            for i in range(ds.n):
                if ds.day_ids[i] != day:
                    continue
                p, y = int(preds[i]), int(ds.labels[i])
                if p == 1 and y == 1:
                    tp += 1
                elif p == 1 and y == 0:
                    fp += 1
                elif p == 0 and y == 0:
                    tn += 1
                else:
                    fn += 1
            assert (m.tp, m.fp, m.tn, m.fn) == (tp, fp, tn, fn)

    def test_evaluate_order_invariant(self, tiny_dataset_dir, tiny_model):
        files = sorted(tiny_dataset_dir.glob("*.csi"))
        ds = pipeline.build_dataset(files[:1])
        rng = np.random.default_rng(7)
        perm = rng.permutation(ds.n)
        shuffled = ds.subset(perm)
        ds.splits = {"test": np.arange(ds.n)}
        shuffled.splits = {"test": np.arange(ds.n)}
        a = pipeline.evaluate(tiny_model, ds, "test")["overall"]
        b = pipeline.evaluate(tiny_model, shuffled, "test")["overall"]
        assert (a.tp, a.fp, a.tn, a.fn) == (b.tp, b.fp, b.tn, b.fn)

    def test_training_is_deterministic(self, tiny_dataset_dir, tmp_path):
        files = sorted(tiny_dataset_dir.glob("*.csi"))
        ds = pipeline.build_dataset(files)
        days = ds.days
        ds.assign_splits(days[:-1], days[-1:])
        cfg = pipeline.TrainConfig(epochs=2, batch_size=8)
        m1, r1 = pipeline.train(ds, config=cfg, seed=11)
        m2, r2 = pipeline.train(ds, config=cfg, seed=11)
        p1, p2 = tmp_path / "m1.rfpm", tmp_path / "m2.rfpm"
        save_model(p1, m1)
        save_model(p2, m2)
        assert p1.read_bytes() == p2.read_bytes()
        assert r1.epoch_loss == r2.epoch_loss

    def test_report_shape_and_confusion_totals(self, tiny_dataset_dir):
        files = sorted(tiny_dataset_dir.glob("*.csi"))
        ds = pipeline.build_dataset(files)
        days = ds.days
        ds.assign_splits(days[:-1], days[-1:])
        cfg = pipeline.TrainConfig(epochs=3, batch_size=8)
        model, report = pipeline.train(ds, config=cfg, seed=1)
        assert len(report.epoch_loss) == 3
        assert len(report.epoch_acc) == 3
        total = sum(m.total for m in report.test_days.values())
        assert total == len(ds.splits["test"])
        assert report.wall_seconds > 0
        text = report.to_text()
        assert "epoch" in text and days[-1] in text
        kinds = {r["kind"] for r in report.to_records()}
        assert kinds == {"epoch", "test_day", "summary"}
